//! PSNR measurement and the benchmark / patch-size sweep harness.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::baseline::switching_median;
use crate::cnn::{refine, CnnError, CnnModel};
use crate::image::{load_pgm, to_u8, GrayImage, ImageError};
use crate::nlsf::{auto_patch_size, nlsf, NlsfConfig, NlsfError};
use crate::noise::{derive_seed, detect, inject, name_seed, NoiseError, NoiseSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no PGM images found in {0}")]
    EmptyTestset(String),
    #[error("no model trained for density {0}")]
    MissingModel(f64),
    #[error("invalid benchmark setup: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nlsf(#[from] NlsfError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// MSE in the 8-bit domain and the matching PSNR. `psnr_db` is
/// `f64::INFINITY` exactly when the quantized images are identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub psnr_db: f64,
}

impl Metrics {
    pub fn from_mse(mse: f64) -> Self {
        let psnr_db = if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (255.0f64 * 255.0 / mse).log10()
        };
        Self { mse, psnr_db }
    }

    pub fn is_exact(&self) -> bool {
        self.psnr_db.is_infinite()
    }
}

/// PSNR of `test` against `reference`, both quantized to 8 bits first.
pub fn psnr(reference: &GrayImage, test: &GrayImage) -> Result<Metrics> {
    if reference.width() != test.width() || reference.height() != test.height() {
        return Err(EvalError::DimensionMismatch(
            reference.width(),
            reference.height(),
            test.width(),
            test.height(),
        ));
    }
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = f64::from(to_u8(a)) - f64::from(to_u8(b));
            d * d
        })
        .sum();
    Ok(Metrics::from_mse(sum / reference.len() as f64))
}

/// Formats a PSNR for reports; the exact-match marker prints as `inf`.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// The corrupted image itself.
    Noisy,
    /// Switching 3x3 median.
    Median,
    Nlsf,
    NlsfCnn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Noisy => "noisy",
            Self::Median => "median",
            Self::Nlsf => "nlsf",
            Self::NlsfCnn => "nlsf-cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noisy" => Some(Self::Noisy),
            "median" => Some(Self::Median),
            "nlsf" => Some(Self::Nlsf),
            "nlsf-cnn" => Some(Self::NlsfCnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub density: f64,
    pub method: String,
    pub psnr_db: f64,
    /// Wall time of the method, averaged over repeats.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub density: f64,
    pub method: String,
    pub mean_psnr_db: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<Aggregate>,
}

fn row_order(a: &BenchRow, b: &BenchRow) -> Ordering {
    a.image
        .cmp(&b.image)
        .then(a.density.total_cmp(&b.density))
        .then(a.method.cmp(&b.method))
}

impl BenchReport {
    /// Sorts rows by (image, density, method) and computes per
    /// (density, method) means.
    pub fn from_rows(mut rows: Vec<BenchRow>) -> Self {
        rows.sort_by(row_order);
        let mut keys: Vec<(f64, String)> =
            rows.iter().map(|r| (r.density, r.method.clone())).collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keys.dedup();
        let aggregates = keys
            .into_iter()
            .map(|(density, method)| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.density == density && r.method == method)
                    .map(|r| r.psnr_db)
                    .collect();
                Aggregate {
                    density,
                    mean_psnr_db: vals.iter().sum::<f64>() / vals.len() as f64,
                    count: vals.len(),
                    method,
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn mean(&self, density: f64, method: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.density == density && a.method == method)
            .map(|a| a.mean_psnr_db)
    }

    /// Per-image rows followed by `mean` rows. Timing is optional because
    /// it is the only nondeterministic column.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("image,density,method,psnr_db");
        s.push_str(if with_timing { ",seconds\n" } else { "\n" });
        for r in &self.rows {
            write!(
                s,
                "{},{},{},{}",
                r.image,
                r.density,
                r.method,
                format_psnr(r.psnr_db)
            )
            .unwrap();
            if with_timing {
                write!(s, ",{:.3}", r.seconds).unwrap();
            }
            s.push('\n');
        }
        for a in &self.aggregates {
            write!(
                s,
                "mean,{},{},{}",
                a.density,
                a.method,
                format_psnr(a.mean_psnr_db)
            )
            .unwrap();
            if with_timing {
                s.push(',');
            }
            s.push('\n');
        }
        s
    }

    /// Aligned table: one line per (image, density), one column per method.
    pub fn to_table(&self) -> String {
        let mut methods: Vec<&str> = self.rows.iter().map(|r| r.method.as_str()).collect();
        methods.sort();
        methods.dedup();
        let mut s = format!("{:<16} {:>6}", "image", "level");
        for m in &methods {
            write!(s, " {m:>10}").unwrap();
        }
        s.push('\n');
        let mut cells: Vec<(&str, f64)> = self
            .rows
            .iter()
            .map(|r| (r.image.as_str(), r.density))
            .collect();
        cells.dedup();
        let mut line = |label: &str, density: f64, value: &dyn Fn(&str) -> Option<f64>| {
            write!(s, "{label:<16} {:>5.0}%", density * 100.0).unwrap();
            for m in &methods {
                match value(m) {
                    Some(v) => write!(s, " {:>10}", format_psnr_short(v)).unwrap(),
                    None => write!(s, " {:>10}", "-").unwrap(),
                }
            }
            s.push('\n');
        };
        for (image, density) in cells {
            line(image, density, &|m| {
                self.rows
                    .iter()
                    .find(|r| r.image == image && r.density == density && r.method == m)
                    .map(|r| r.psnr_db)
            });
        }
        let mut densities: Vec<f64> = self.aggregates.iter().map(|a| a.density).collect();
        densities.dedup();
        for d in densities {
            line("average", d, &|m| self.mean(d, m));
        }
        s
    }
}

fn format_psnr_short(db: f64) -> String {
    if db.is_infinite() {
        "inf".into()
    } else {
        format!("{db:.2}")
    }
}

/// How the NLSF patch size is chosen for each density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchSizeChoice {
    /// 3 below 30% density, otherwise 5.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub densities: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Noise realizations per (image, density); PSNRs are averaged.
    pub repeats: usize,
    pub patch_size: PatchSizeChoice,
    /// Radius, bandwidth, delta and growth; its patch size is overridden
    /// by `patch_size`.
    pub nlsf: NlsfConfig,
    /// One model per density, matched through `meta.density`.
    pub models: Vec<CnnModel>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            densities: vec![0.3, 0.5, 0.7],
            methods: vec![Method::Nlsf],
            seed: 0,
            repeats: 1,
            patch_size: PatchSizeChoice::Auto,
            nlsf: NlsfConfig::default(),
            models: Vec::new(),
        }
    }
}

impl BenchConfig {
    fn nlsf_for(&self, density: f64) -> NlsfConfig {
        let patch_size = match self.patch_size {
            PatchSizeChoice::Auto => auto_patch_size(density),
            PatchSizeChoice::Fixed(n) => n,
        };
        NlsfConfig {
            patch_size,
            ..self.nlsf
        }
    }

    pub fn model_for(&self, density: f64) -> Option<&CnnModel> {
        self.models
            .iter()
            .find(|m| (f64::from(m.meta.density) - density).abs() < 1e-4)
    }

    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(EvalError::Invalid("repeats must be >= 1".into()));
        }
        if self.methods.is_empty() || self.densities.is_empty() {
            return Err(EvalError::Invalid(
                "need at least one method and density".into(),
            ));
        }
        if let Some(d) = self.densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(EvalError::Invalid(format!("density {d} outside [0, 1]")));
        }
        if self.methods.contains(&Method::NlsfCnn) {
            if let Some(&d) = self
                .densities
                .iter()
                .find(|&&d| self.model_for(d).is_none())
            {
                return Err(EvalError::MissingModel(d));
            }
        }
        for &d in &self.densities {
            self.nlsf_for(d).validate()?;
        }
        Ok(())
    }
}

/// Noise seed for one (image, density, repeat) cell; independent of the
/// other images in the set.
pub fn cell_seed(master: u64, image: &str, density: f64, repeat: usize) -> u64 {
    let per_image = name_seed(master, image);
    derive_seed(
        per_image,
        (density.to_bits() >> 8) ^ ((repeat as u64) << 56),
    )
}

/// Runs every method on every (image, density) cell.
pub fn bench_images(images: &[(String, GrayImage)], cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (name, clean) in images {
        for &density in &cfg.densities {
            let nlsf_cfg = cfg.nlsf_for(density);
            let mut psnr_sum = vec![0.0; cfg.methods.len()];
            let mut secs = vec![0.0; cfg.methods.len()];
            for rep in 0..cfg.repeats {
                let spec = NoiseSpec::balanced(density, cell_seed(cfg.seed, name, density, rep))?;
                let noisy = inject(clean, &spec);
                let mut filtered: Option<GrayImage> = None;
                for (k, &method) in cfg.methods.iter().enumerate() {
                    let start = Instant::now();
                    let restored = match method {
                        Method::Noisy => noisy.clone(),
                        Method::Median => {
                            switching_median(&noisy, &detect(&noisy, nlsf_cfg.delta)?)
                        }
                        Method::Nlsf | Method::NlsfCnn => {
                            let f = match &filtered {
                                Some(f) => f.clone(),
                                None => {
                                    let mask = detect(&noisy, nlsf_cfg.delta)?;
                                    let f = nlsf(&noisy, &mask, &nlsf_cfg)?;
                                    filtered = Some(f.clone());
                                    f
                                }
                            };
                            if method == Method::NlsfCnn {
                                let model = cfg
                                    .model_for(density)
                                    .ok_or(EvalError::MissingModel(density))?;
                                refine(&f, model)?
                            } else {
                                f
                            }
                        }
                    };
                    secs[k] += start.elapsed().as_secs_f64();
                    psnr_sum[k] += psnr(clean, &restored)?.psnr_db;
                }
            }
            for (k, &method) in cfg.methods.iter().enumerate() {
                rows.push(BenchRow {
                    image: name.clone(),
                    density,
                    method: method.name().to_string(),
                    psnr_db: psnr_sum[k] / cfg.repeats as f64,
                    seconds: secs[k] / cfg.repeats as f64,
                });
            }
        }
    }
    Ok(BenchReport::from_rows(rows))
}

/// Every `*.pgm` in `dir`, sorted by file name; names drop the extension.
pub fn load_testset(dir: impl AsRef<Path>) -> Result<Vec<(String, GrayImage)>> {
    let dir = dir.as_ref();
    let io = |source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::EmptyTestset(dir.display().to_string()));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_pgm(&p)?))
        })
        .collect()
}

pub fn bench(testset: impl AsRef<Path>, cfg: &BenchConfig) -> Result<BenchReport> {
    bench_images(&load_testset(testset)?, cfg)
}

/// NLSF-only PSNR for each (patch size, density); rows are labelled
/// `nlsf-L<size>`.
pub fn patch_size_sweep(
    name: &str,
    image: &GrayImage,
    sizes: &[usize],
    densities: &[f64],
    seed: u64,
    base: &NlsfConfig,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for &density in densities {
        let noisy = inject(
            image,
            &NoiseSpec::balanced(density, cell_seed(seed, name, density, 0))?,
        );
        let mask = detect(&noisy, base.delta)?;
        for &size in sizes {
            let cfg = NlsfConfig {
                patch_size: size,
                ..*base
            };
            let start = Instant::now();
            let out = nlsf(&noisy, &mask, &cfg)?;
            rows.push(BenchRow {
                image: name.to_string(),
                density,
                method: format!("nlsf-L{size}"),
                psnr_db: psnr(image, &out)?.psnr_db,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(BenchReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene(w: usize, h: usize, k: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |r, c| {
            (10 + (r * 3 + c * 5 + k * 11) % 230) as f64 / 255.0
        })
        .unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = scene(9, 7, 0);
        let m = psnr(&a, &a).unwrap();
        assert_eq!(m.mse, 0.0);
        assert!(m.is_exact());
        assert_eq!(format_psnr(m.psnr_db), "inf");
    }

    #[test]
    fn psnr_worst_case_is_zero() {
        let a = GrayImage::filled(4, 4, 0.0).unwrap();
        let b = GrayImage::filled(4, 4, 1.0).unwrap();
        let m = psnr(&a, &b).unwrap();
        assert_eq!(m.mse, 255.0 * 255.0);
        assert_eq!(m.psnr_db, 0.0);
    }

    #[test]
    fn psnr_unit_mse() {
        let a = GrayImage::from_bytes(2, 1, &[10, 20]).unwrap();
        let b = GrayImage::from_bytes(2, 1, &[11, 19]).unwrap();
        let m = psnr(&a, &b).unwrap();
        assert_eq!(m.mse, 1.0);
        assert!((m.psnr_db - 48.1308).abs() < 1e-3);
        assert!((m.psnr_db - 20.0 * 255f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_rejects_size_mismatch() {
        assert!(matches!(
            psnr(&scene(3, 3, 0), &scene(3, 4, 0)),
            Err(EvalError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn aggregates_are_row_means() {
        let rows = vec![
            BenchRow {
                image: "b".into(),
                density: 0.5,
                method: "nlsf".into(),
                psnr_db: 30.0,
                seconds: 0.0,
            },
            BenchRow {
                image: "a".into(),
                density: 0.5,
                method: "nlsf".into(),
                psnr_db: 28.0,
                seconds: 0.0,
            },
            BenchRow {
                image: "a".into(),
                density: 0.3,
                method: "nlsf".into(),
                psnr_db: 33.0,
                seconds: 0.0,
            },
        ];
        let rep = BenchReport::from_rows(rows);
        assert_eq!(rep.rows[0].image, "a");
        assert_eq!(rep.rows[0].density, 0.3);
        assert_eq!(rep.mean(0.5, "nlsf"), Some(29.0));
        assert_eq!(rep.mean(0.3, "nlsf"), Some(33.0));
        assert!(rep.to_csv(false).contains("mean,0.5,nlsf,29.0000"));
        assert!(rep.to_table().contains("average"));
    }

    #[test]
    fn zero_density_is_exact_for_every_method() {
        let images = vec![
            ("a".to_string(), scene(20, 20, 1)),
            ("b".to_string(), scene(16, 24, 2)),
        ];
        let cfg = BenchConfig {
            densities: vec![0.0],
            methods: vec![Method::Noisy, Method::Median, Method::Nlsf],
            ..Default::default()
        };
        let rep = bench_images(&images, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert!(rep.rows.iter().all(|r| r.psnr_db.is_infinite()));
    }

    #[test]
    fn missing_model_is_reported() {
        let cfg = BenchConfig {
            methods: vec![Method::NlsfCnn],
            densities: vec![0.5],
            ..Default::default()
        };
        assert!(matches!(
            bench_images(&[("a".into(), scene(60, 60, 0))], &cfg),
            Err(EvalError::MissingModel(_))
        ));
    }

    #[test]
    fn rerun_is_identical_and_seeds_are_per_image() {
        let a = ("a".to_string(), scene(24, 24, 1));
        let b = ("b".to_string(), scene(24, 24, 2));
        let cfg = BenchConfig {
            densities: vec![0.3, 0.6],
            methods: vec![Method::Median, Method::Nlsf],
            seed: 5,
            ..Default::default()
        };
        let one = bench_images(&[a.clone(), b.clone()], &cfg).unwrap();
        let two = bench_images(&[a.clone(), b], &cfg).unwrap();
        assert_eq!(one.to_csv(false), two.to_csv(false));
        let alone = bench_images(&[a], &cfg).unwrap();
        let a_rows: Vec<_> = one
            .rows
            .iter()
            .filter(|r| r.image == "a")
            .map(|r| r.psnr_db)
            .collect();
        let alone_rows: Vec<_> = alone.rows.iter().map(|r| r.psnr_db).collect();
        assert_eq!(a_rows, alone_rows);
    }

    #[test]
    fn sweep_single_cell() {
        let rep = patch_size_sweep(
            "x",
            &scene(20, 20, 0),
            &[3],
            &[0.3],
            1,
            &NlsfConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].method, "nlsf-L3");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Noisy, Method::Median, Method::Nlsf, Method::NlsfCnn] {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("bm3d"), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psnr_symmetric_and_offset_invariant(
            bytes in prop::collection::vec(20u8..200, 16), other in prop::collection::vec(20u8..200, 16), k in 0u8..50
        ) {
            let a = GrayImage::from_bytes(4, 4, &bytes).unwrap();
            let b = GrayImage::from_bytes(4, 4, &other).unwrap();
            let p = psnr(&a, &b).unwrap();
            prop_assert_eq!(p, psnr(&b, &a).unwrap());
            let shift = |v: &[u8]| GrayImage::from_bytes(4, 4, &v.iter().map(|x| x + k).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(p, psnr(&shift(&bytes), &shift(&other)).unwrap());
        }

        #[test]
        fn identity_method_degrades_with_density(seed in any::<u64>()) {
            let img = scene(64, 64, 3);
            let cfg = BenchConfig {
                densities: vec![0.1, 0.4, 0.8],
                methods: vec![Method::Noisy],
                seed,
                ..Default::default()
            };
            let rep = bench_images(&[("s".into(), img)], &cfg).unwrap();
            let p: Vec<f64> = rep.rows.iter().map(|r| r.psnr_db).collect();
            prop_assert!(p[0] > p[1] && p[1] > p[2]);
        }
    }
}
