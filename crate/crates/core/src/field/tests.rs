use super::*;
use rand::Rng;

fn tiny_config() -> FieldConfig {
    FieldConfig {
        levels: 2,
        log2_table_size: 4,
        features: 2,
        base_resolution: 3,
        per_level_scale: 2.0,
        hidden_width: 8,
        hidden_depth: 2,
    }
}

fn random_inputs(
    field: &RadianceField,
    n: usize,
    seed: u64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = (0..n)
        .map(|_| Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
        .collect();
    let dirs = (0..n)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..1.0),
            )
            .normalize()
        })
        .collect();
    let cond = (0..n * field.conditioning().dim())
        .map(|_| rng.gen::<f64>())
        .collect();
    (xs, dirs, cond)
}

fn scrambled(conditioning: Conditioning, seed: u64) -> RadianceField {
    let mut field = RadianceField::new(tiny_config(), conditioning, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let range = field.table_range();
    for p in &mut field.params_mut()[range] {
        *p = rng.gen_range(-1.0..1.0);
    }
    field
}

fn weighted_loss(
    field: &RadianceField,
    xs: &[Vector3<f64>],
    dirs: &[Vector3<f64>],
    cond: &[f64],
    a: &[f64],
    b: &[Rgb],
) -> f64 {
    let out = field.forward(xs, dirs, cond, None).unwrap();
    out.iter()
        .enumerate()
        .map(|(i, o)| a[i] * o.sigma + (0..3).map(|c| b[i][c] * o.color[c]).sum::<f64>())
        .sum()
}

fn gradient_check(conditioning: Conditioning) {
    let mut field = scrambled(conditioning, 11);
    let (xs, dirs, cond) = random_inputs(&field, 6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<Rgb> = (0..6)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();

    let mut tape = FieldTape::default();
    field.forward(&xs, &dirs, &cond, Some(&mut tape)).unwrap();
    let mut grads = vec![0.0; field.params().len()];
    field.backward(&tape, &a, &b, &mut grads).unwrap();

    let h = 1e-5;
    for i in 0..field.params().len() {
        let orig = field.params()[i];
        field.params_mut()[i] = orig + h;
        let up = weighted_loss(&field, &xs, &dirs, &cond, &a, &b);
        field.params_mut()[i] = orig - h;
        let down = weighted_loss(&field, &xs, &dirs, &cond, &a, &b);
        field.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-6);
        assert!(
            rel < 1e-4,
            "param {i}: analytic {} numeric {numeric}",
            grads[i]
        );
    }
}

#[test]
fn gradients_match_finite_differences_projected_color() {
    gradient_check(Conditioning::ProjectedColor);
}

#[test]
fn gradients_match_finite_differences_space_time() {
    gradient_check(Conditioning::SpaceTime);
}

#[test]
fn gradients_match_finite_differences_unconditioned() {
    gradient_check(Conditioning::None);
}

#[test]
fn zero_params_give_unit_density_and_grey() {
    for kind in [Conditioning::ProjectedColor, Conditioning::SpaceTime] {
        let field = RadianceField::zeros(FieldConfig::default(), kind).unwrap();
        let cond = match kind {
            Conditioning::ProjectedColor => {
                Condition::Stats(ProjectedColorStats::from_samples(&[[0.2, 0.4, 0.9]]))
            }
            _ => Condition::Time(0.37),
        };
        let out = field
            .eval(&Vector3::new(0.1, 0.5, 0.9), &Vector3::z(), &cond)
            .unwrap();
        assert_eq!(out.sigma, 1.0);
        assert_eq!(out.color, [0.5; 3]);
    }
}

#[test]
fn outputs_stay_in_range_and_are_deterministic() {
    let field =
        RadianceField::new(FieldConfig::default(), Conditioning::ProjectedColor, 5).unwrap();
    let mut big = field.clone();
    // push weights large to exercise the clamp and saturation
    for p in big.params_mut().iter_mut() {
        *p *= 300.0;
    }
    for f in [&field, &big] {
        let (xs, dirs, cond) = random_inputs(f, 10_000, 6);
        let a = f.forward(&xs, &dirs, &cond, None).unwrap();
        let b = f.forward(&xs, &dirs, &cond, None).unwrap();
        assert_eq!(a, b);
        for o in &a {
            assert!((0.0..=MAX_DENSITY).contains(&o.sigma));
            assert!(o.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

#[test]
fn backward_is_linear_in_output_gradients() {
    let field = scrambled(Conditioning::ProjectedColor, 21);
    let (xs, dirs, cond) = random_inputs(&field, 5, 22);
    let mut tape = FieldTape::default();
    field.forward(&xs, &dirs, &cond, Some(&mut tape)).unwrap();

    let mut zero = vec![0.0; field.params().len()];
    field
        .backward(&tape, &[0.0; 5], &[[0.0; 3]; 5], &mut zero)
        .unwrap();
    assert!(zero.iter().all(|g| *g == 0.0));

    let ds: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
    let dc: Vec<Rgb> = (0..5).map(|i| [0.1 * i as f64, -0.2, 0.05]).collect();
    let mut g1 = vec![0.0; field.params().len()];
    field.backward(&tape, &ds, &dc, &mut g1).unwrap();
    let s = 2.5;
    let ds2: Vec<f64> = ds.iter().map(|v| v * s).collect();
    let dc2: Vec<Rgb> = dc.iter().map(|c| [c[0] * s, c[1] * s, c[2] * s]).collect();
    let mut g2 = vec![0.0; field.params().len()];
    field.backward(&tape, &ds2, &dc2, &mut g2).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a * s - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn mismatched_tape_is_contract_error() {
    let small = scrambled(Conditioning::ProjectedColor, 1);
    let big = RadianceField::new(FieldConfig::default(), Conditioning::ProjectedColor, 1).unwrap();
    let (xs, dirs, cond) = random_inputs(&small, 2, 2);
    let mut tape = FieldTape::default();
    small.forward(&xs, &dirs, &cond, Some(&mut tape)).unwrap();
    let mut grads = vec![0.0; big.params().len()];
    assert!(matches!(
        big.backward(&tape, &[0.0; 2], &[[0.0; 3]; 2], &mut grads),
        Err(Error::Contract(_))
    ));
}

#[test]
fn domain_errors() {
    let field = RadianceField::new(tiny_config(), Conditioning::SpaceTime, 0).unwrap();
    assert!(matches!(
        field.hash_encode(&Vector3::new(1.2, 0.0, 0.0)),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        field.eval(
            &Vector3::repeat(0.5),
            &Vector3::new(f64::NAN, 0.0, 1.0),
            &Condition::Time(0.0)
        ),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        field.eval(
            &Vector3::repeat(0.5),
            &Vector3::z(),
            &Condition::Time(f64::INFINITY)
        ),
        Err(Error::Domain(_))
    ));
    let stats = Condition::Stats(ProjectedColorStats::UNOBSERVED);
    assert!(matches!(
        field.eval(&Vector3::repeat(0.5), &Vector3::z(), &stats),
        Err(Error::Contract(_))
    ));
}

#[test]
fn conditioning_changes_output() {
    let field = scrambled(Conditioning::ProjectedColor, 3);
    let x = Vector3::new(0.3, 0.6, 0.2);
    let a = ProjectedColorStats::from_samples(&[[0.1, 0.2, 0.3]]);
    let b = ProjectedColorStats::from_samples(&[[0.9, 0.8, 0.1]]);
    let oa = field.eval(&x, &Vector3::z(), &Condition::Stats(a)).unwrap();
    let ob = field.eval(&x, &Vector3::z(), &Condition::Stats(b)).unwrap();
    assert_ne!(oa, ob);

    let st = scrambled(Conditioning::SpaceTime, 3);
    let t = Condition::Time(0.25);
    assert_eq!(
        st.eval(&x, &Vector3::z(), &t).unwrap(),
        st.eval(&x, &Vector3::z(), &t).unwrap()
    );
}

#[test]
fn checkpoint_round_trip() {
    let field = RadianceField::new(FieldConfig::default(), Conditioning::SpaceTime, 8).unwrap();
    let mut bytes = Vec::new();
    field.write_checkpoint(&mut bytes).unwrap();
    assert_eq!(&bytes[..8], checkpoint::MAGIC);
    assert_eq!(
        bytes.len(),
        checkpoint::HEADER_LEN + 4 * field.params().len()
    );
    assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 1);
    let back = RadianceField::read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.config(), field.config());
    assert_eq!(back.conditioning(), field.conditioning());
    for (a, b) in field.params().iter().zip(back.params()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    bytes[0] = b'X';
    assert!(RadianceField::read_checkpoint(&mut bytes.as_slice()).is_err());
}
