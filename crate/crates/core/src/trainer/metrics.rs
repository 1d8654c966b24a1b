use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::write_depth_png;
use crate::renderer::RenderedView;

pub const CSV_HEADER: &str = "frame,psnr_db,train_ms,render_ms,mean_samples_per_ray";

/// Test-view quality of a frame rendered before training on it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrapolation {
    /// Against frame k's ground truth.
    pub psnr_db: f64,
    /// Against frame k-1's ground truth.
    pub psnr_prev_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Mean over test views.
    pub psnr_db: f64,
    pub train_ms: f64,
    pub render_ms: f64,
    pub mean_samples_per_ray: f64,
    pub extrapolation: Option<Extrapolation>,
}

impl FrameMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.3},{:.3},{:.4}",
            self.frame, self.psnr_db, self.train_ms, self.render_ms, self.mean_samples_per_ray
        )
    }
}

/// A rendered test view handed to sinks together with the metrics row.
pub struct ViewOutput<'a> {
    pub camera_id: &'a str,
    pub view: &'a RenderedView,
    pub far: f64,
}

pub trait MetricsSink {
    fn record(&mut self, metrics: &FrameMetrics, views: &[ViewOutput<'_>]) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<FrameMetrics> {
    fn record(&mut self, metrics: &FrameMetrics, _views: &[ViewOutput<'_>]) -> Result<()> {
        self.push(metrics.clone());
        Ok(())
    }
}

/// Writes `metrics.csv` rows as frames complete.
pub struct CsvSink<W: Write> {
    out: W,
    path: PathBuf,
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::new(file), path)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W, path: &Path) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, metrics: &FrameMetrics, _views: &[ViewOutput<'_>]) -> Result<()> {
        writeln!(self.out, "{}", metrics.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes `<dir>/<camera>/<frame>.png` and `<frame>_depth.png` per test view.
pub struct RenderSink {
    dir: PathBuf,
}

impl RenderSink {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }
}

impl MetricsSink for RenderSink {
    fn record(&mut self, metrics: &FrameMetrics, views: &[ViewOutput<'_>]) -> Result<()> {
        for v in views {
            let dir = self.dir.join(v.camera_id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            v.view
                .image
                .write_png(&dir.join(format!("{:05}.png", metrics.frame)))?;
            let (w, h) = (v.view.image.width(), v.view.image.height());
            write_depth_png(
                &v.view.depth,
                w,
                h,
                v.far,
                &dir.join(format!("{:05}_depth.png", metrics.frame)),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut sink = CsvSink::new(Vec::new(), Path::new("mem")).unwrap();
        let rows = [
            FrameMetrics {
                frame: 0,
                psnr_db: 27.123456,
                train_ms: 1500.0,
                render_ms: 12.3456,
                mean_samples_per_ray: 31.25,
                extrapolation: None,
            },
            FrameMetrics {
                frame: 1,
                psnr_db: 100.0,
                train_ms: 0.0,
                render_ms: 0.0,
                mean_samples_per_ray: 7.0,
                extrapolation: None,
            },
        ];
        for r in &rows {
            sink.record(r, &[]).unwrap();
        }
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(
            text,
            "frame,psnr_db,train_ms,render_ms,mean_samples_per_ray\n\
             0,27.1235,1500.000,12.346,31.2500\n\
             1,100.0000,0.000,0.000,7.0000\n"
        );
    }
}
