//! Pipeline configuration as `section.key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cvae::CvaeConfig;
use crate::error::{Error, Result};
use crate::keypose::KeyPoseConfig;
use crate::nn::KlForm;
use crate::recognizer::GeinetConfig;
use crate::silhouette::{write_text, FrameGeometry};
use crate::temporal::{BilstmConfig, WINDOW_LEN};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub sequences_per_subject: usize,
    pub frames: usize,
    pub noise_rate: f64,
    /// Sequences per subject placed in the gallery; the rest are probes.
    pub gallery_sequences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 20,
            sequences_per_subject: 4,
            frames: 100,
            noise_rate: 0.01,
            gallery_sequences: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub max_rank: usize,
    /// Occlusion masks drawn per probe and sweep bucket.
    pub sweep_draws: usize,
    pub kfold_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_rank: 5,
            sweep_draws: 1,
            kfold_values: vec![2, 3, 5, 10, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub geometry: FrameGeometry,
    pub pca_dim: usize,
    /// Frames sampled (evenly) for fitting the PCA subspace.
    pub pca_max_frames: usize,
    pub keypose: KeyPoseConfig,
    pub cvae: CvaeConfig,
    pub bilstm: BilstmConfig,
    pub geinet: GeinetConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            geometry: FrameGeometry::default(),
            pca_dim: 32,
            pca_max_frames: 2000,
            keypose: KeyPoseConfig::default(),
            cvae: CvaeConfig::default(),
            bilstm: BilstmConfig::default(),
            geinet: GeinetConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Sets the master seed and derives one seed per trained component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cvae.seed = seed;
        self.bilstm.seed = seed.wrapping_add(1);
        self.geinet.seed = seed.wrapping_add(2);
        self
    }

    /// Copies shared values (geometry, k, latent width) into the component
    /// configs and checks cross-field constraints.
    pub fn synced(mut self) -> Result<Self> {
        self.cvae.geometry = self.geometry;
        self.cvae.k = self.keypose.k;
        self.bilstm.d_z = self.cvae.d_z;
        if self.pca_dim == 0 || self.keypose.k < 2 {
            return Err(Error::Config("pca_dim must be >= 1 and keypose.k >= 2".into()));
        }
        if !(0.0..=100.0).contains(&self.keypose.tau_percentile) {
            return Err(Error::Config("keypose.tau_percentile must be within [0, 100]".into()));
        }
        if self.synth.gallery_sequences == 0 || self.synth.gallery_sequences >= self.synth.sequences_per_subject {
            return Err(Error::Config(
                "synth.gallery_sequences must leave at least one probe sequence".into(),
            ));
        }
        Ok(self)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "pipeline.seed" => *self = self.clone().with_seed(parse(key, v)?),
            "geometry.width" => self.geometry.width = parse(key, v)?,
            "geometry.height" => self.geometry.height = parse(key, v)?,
            "window.length" => {
                let n: usize = parse(key, v)?;
                if n != WINDOW_LEN {
                    return Err(Error::Config(format!("window.length is fixed at {WINDOW_LEN}")));
                }
            }
            "keypose.pca_dim" => self.pca_dim = parse(key, v)?,
            "keypose.pca_max_frames" => self.pca_max_frames = parse(key, v)?,
            "keypose.k" => self.keypose.k = parse(key, v)?,
            "keypose.tau_percentile" => self.keypose.tau_percentile = parse(key, v)?,
            "keypose.max_iters" => self.keypose.max_iters = parse(key, v)?,
            "keypose.phase_window" => {
                self.keypose.phase_window = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "cvae.d_z" => self.cvae.d_z = parse(key, v)?,
            "cvae.channels" => {
                self.cvae.channels = parse_list::<usize>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config("cvae.channels needs 3 values".into()))?
            }
            "cvae.cond_width" => self.cvae.cond_width = parse(key, v)?,
            "cvae.dense_width" => self.cvae.dense_width = parse(key, v)?,
            "cvae.lambda1" => self.cvae.lambda1 = parse(key, v)?,
            "cvae.lambda2" => self.cvae.lambda2 = parse(key, v)?,
            "cvae.kl_form" => {
                self.cvae.kl_form = match v {
                    "sigma" => KlForm::Sigma,
                    "standard" => KlForm::Standard,
                    _ => return Err(Error::Config(format!("cvae.kl_form must be sigma or standard, got {v}"))),
                }
            }
            "cvae.epochs" => self.cvae.epochs = parse(key, v)?,
            "cvae.learning_rate" => self.cvae.learning_rate = parse(key, v)?,
            "cvae.batch_size" => self.cvae.batch_size = parse(key, v)?,
            "cvae.seed" => self.cvae.seed = parse(key, v)?,
            "bilstm.hidden" => self.bilstm.hidden = parse(key, v)?,
            "bilstm.epochs" => self.bilstm.epochs = parse(key, v)?,
            "bilstm.learning_rate" => self.bilstm.learning_rate = parse(key, v)?,
            "bilstm.batch_size" => self.bilstm.batch_size = parse(key, v)?,
            "bilstm.degree_schedule" => self.bilstm.degree_schedule = parse_list(key, v)?,
            "bilstm.freeze_masks" => self.bilstm.freeze_masks = parse(key, v)?,
            "bilstm.seed" => self.bilstm.seed = parse(key, v)?,
            "geinet.conv1_channels" => self.geinet.conv1_channels = parse(key, v)?,
            "geinet.conv1_kernel" => self.geinet.conv1_kernel = parse(key, v)?,
            "geinet.conv2_channels" => self.geinet.conv2_channels = parse(key, v)?,
            "geinet.conv2_kernel" => self.geinet.conv2_kernel = parse(key, v)?,
            "geinet.epochs" => self.geinet.epochs = parse(key, v)?,
            "geinet.learning_rate" => self.geinet.learning_rate = parse(key, v)?,
            "geinet.batch_size" => self.geinet.batch_size = parse(key, v)?,
            "geinet.seed" => self.geinet.seed = parse(key, v)?,
            "synth.subjects" => self.synth.subjects = parse(key, v)?,
            "synth.sequences_per_subject" => self.synth.sequences_per_subject = parse(key, v)?,
            "synth.frames" => self.synth.frames = parse(key, v)?,
            "synth.noise_rate" => self.synth.noise_rate = parse(key, v)?,
            "synth.gallery_sequences" => self.synth.gallery_sequences = parse(key, v)?,
            "eval.max_rank" => self.eval.max_rank = parse(key, v)?,
            "eval.sweep_draws" => self.eval.sweep_draws = parse(key, v)?,
            "eval.kfold_values" => self.eval.kfold_values = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `pipeline.seed` applies before
    /// any explicit per-component seed regardless of line order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        entries.sort_by_key(|(k, _)| k != "pipeline.seed");
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.geometry = FrameGeometry::new(cfg.geometry.width, cfg.geometry.height)?;
        cfg.synced()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("missing file {}", path.display())),
            _ => Error::io(format!("reading {}", path.display()), e),
        })?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("pipeline.seed", self.seed.to_string());
        kv("geometry.width", self.geometry.width.to_string());
        kv("geometry.height", self.geometry.height.to_string());
        kv("window.length", WINDOW_LEN.to_string());
        kv("keypose.pca_dim", self.pca_dim.to_string());
        kv("keypose.pca_max_frames", self.pca_max_frames.to_string());
        kv("keypose.k", self.keypose.k.to_string());
        kv("keypose.tau_percentile", self.keypose.tau_percentile.to_string());
        kv("keypose.max_iters", self.keypose.max_iters.to_string());
        kv(
            "keypose.phase_window",
            self.keypose.phase_window.map_or("none".into(), |w| w.to_string()),
        );
        let c = &self.cvae;
        kv("cvae.d_z", c.d_z.to_string());
        kv("cvae.channels", join(&c.channels));
        kv("cvae.cond_width", c.cond_width.to_string());
        kv("cvae.dense_width", c.dense_width.to_string());
        kv("cvae.lambda1", c.lambda1.to_string());
        kv("cvae.lambda2", c.lambda2.to_string());
        kv(
            "cvae.kl_form",
            match c.kl_form {
                KlForm::Sigma => "sigma",
                KlForm::Standard => "standard",
            }
            .into(),
        );
        kv("cvae.epochs", c.epochs.to_string());
        kv("cvae.learning_rate", c.learning_rate.to_string());
        kv("cvae.batch_size", c.batch_size.to_string());
        kv("cvae.seed", c.seed.to_string());
        let b = &self.bilstm;
        kv("bilstm.hidden", b.hidden.to_string());
        kv("bilstm.epochs", b.epochs.to_string());
        kv("bilstm.learning_rate", b.learning_rate.to_string());
        kv("bilstm.batch_size", b.batch_size.to_string());
        kv("bilstm.degree_schedule", join(&b.degree_schedule));
        kv("bilstm.freeze_masks", b.freeze_masks.to_string());
        kv("bilstm.seed", b.seed.to_string());
        let g = &self.geinet;
        kv("geinet.conv1_channels", g.conv1_channels.to_string());
        kv("geinet.conv1_kernel", g.conv1_kernel.to_string());
        kv("geinet.conv2_channels", g.conv2_channels.to_string());
        kv("geinet.conv2_kernel", g.conv2_kernel.to_string());
        kv("geinet.epochs", g.epochs.to_string());
        kv("geinet.learning_rate", g.learning_rate.to_string());
        kv("geinet.batch_size", g.batch_size.to_string());
        kv("geinet.seed", g.seed.to_string());
        let y = &self.synth;
        kv("synth.subjects", y.subjects.to_string());
        kv("synth.sequences_per_subject", y.sequences_per_subject.to_string());
        kv("synth.frames", y.frames.to_string());
        kv("synth.noise_rate", y.noise_rate.to_string());
        kv("synth.gallery_sequences", y.gallery_sequences.to_string());
        kv("eval.max_rank", self.eval.max_rank.to_string());
        kv("eval.sweep_draws", self.eval.sweep_draws.to_string());
        kv("eval.kfold_values", join(&self.eval.kfold_values));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default().synced().unwrap();
        assert_eq!(PipelineConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.keypose.k, 16);
        assert_eq!(cfg.cvae.lambda1, 1.0);
        assert_eq!(cfg.cvae.lambda2, 0.5);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = PipelineConfig::from_text(
            "# toy\ngeometry.width = 32\ngeometry.height = 32\ncvae.d_z = 8 # small\ncvae.kl_form = standard\nbilstm.degree_schedule = 0, 0.5\npipeline.seed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.cvae.geometry, FrameGeometry::new(32, 32).unwrap());
        assert_eq!(cfg.bilstm.d_z, 8);
        assert_eq!(cfg.cvae.kl_form, KlForm::Standard);
        assert_eq!(cfg.bilstm.degree_schedule, vec![0.0, 0.5]);
        assert_eq!((cfg.cvae.seed, cfg.bilstm.seed), (9, 10));
        assert_eq!(PipelineConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(PipelineConfig::from_text("nope.key = 1").is_err());
        assert!(PipelineConfig::from_text("cvae.d_z = x").is_err());
        assert!(PipelineConfig::from_text("window.length = 8").is_err());
        assert!(PipelineConfig::from_text("just text").is_err());
    }
}
