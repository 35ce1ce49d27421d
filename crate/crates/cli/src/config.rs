//! Flat `key=value` experiment configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Lists
//! are comma separated. Keys not listed in [`ExperimentConfig::keys`] are
//! rejected with their line number.

use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bundleforge::corpus::{Scenario, SynthConfig};
use bundleforge::diet::TrainConfig;
use bundleforge::feedback::FeedbackConfig;
use bundleforge::{Error, Result};

/// Everything one experiment needs, from corpus generation to reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Root of every derived sub-seed.
    pub seed: u64,
    /// Directory receiving every artifact.
    pub out: PathBuf,
    /// Dataset directory; `<out>/data` when unset.
    pub data: Option<PathBuf>,
    pub synth: SynthConfig,
    pub feedback: FeedbackConfig,
    pub train: TrainConfig,
    pub head_ratio: f64,
    pub tail_ratio: f64,
    pub scenarios: Vec<Scenario>,
    pub ks: Vec<usize>,
    pub sweep_ratios: Vec<f64>,
    pub hist_bins: usize,
    /// Rows per case in case-study exports.
    pub case_k: usize,
    /// Pop-to-LT cases exported by `report`.
    pub case_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            out: PathBuf::from("runs/default"),
            data: None,
            synth: SynthConfig::default(),
            feedback: FeedbackConfig::default(),
            train: TrainConfig::default(),
            head_ratio: 0.3,
            tail_ratio: 0.3,
            scenarios: Scenario::ALL.to_vec(),
            ks: vec![20, 40],
            sweep_ratios: vec![0.5, 0.4, 0.3, 0.2, 0.1],
            hist_bins: 50,
            case_k: 5,
            case_count: 3,
        }
    }
}

/// Comma-separated rendering of a list value.
struct Joined<'a, T>(&'a [T]);

impl<T: Display> Display for Joined<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            v.fmt(f)?;
        }
        Ok(())
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(s.trim())).collect()
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>;

/// A configuration key with its accessors.
pub struct Key {
    pub name: &'static str,
    get: Getter,
    set: Setter,
}

macro_rules! keys {
    ($($name:literal => $c:ident . $($f:ident).+ $(: $kind:ident)?),+ $(,)?) => {
        vec![$(keys!(@one $name, $c, $($f).+ $(, $kind)?)),+]
    };
    (@one $name:literal, $c:ident, $($f:ident).+) => {
        Key {
            name: $name,
            get: |$c| $c.$($f).+.to_string(),
            set: |$c, v| {
                $c.$($f).+ = parse(v)?;
                Ok(())
            },
        }
    };
    (@one $name:literal, $c:ident, $($f:ident).+, list) => {
        Key {
            name: $name,
            get: |$c| Joined(&$c.$($f).+).to_string(),
            set: |$c, v| {
                $c.$($f).+ = parse_list(v)?;
                Ok(())
            },
        }
    };
    (@one $name:literal, $c:ident, $($f:ident).+, path) => {
        Key {
            name: $name,
            get: |$c| $c.$($f).+.display().to_string(),
            set: |$c, v| {
                $c.$($f).+ = PathBuf::from(v);
                Ok(())
            },
        }
    };
}

impl ExperimentConfig {
    /// Every accepted key, in dump order.
    pub fn keys() -> Vec<Key> {
        let mut keys = keys![
            "seed" => c.seed,
            "out" => c.out: path,
        ];
        keys.push(Key {
            name: "data",
            get: |c| c.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            set: |c, v| {
                c.data = (!v.is_empty()).then(|| PathBuf::from(v));
                Ok(())
            },
        });
        keys.extend(keys![
            "n_items" => c.synth.n_items,
            "n_users" => c.synth.n_users,
            "n_bundles" => c.synth.n_bundles,
            "zipf_exponent" => c.synth.zipf_exponent,
            "d_t" => c.synth.d_t,
            "d_m" => c.synth.d_m,
            "n_themes" => c.synth.n_themes,
            "theme_affinity" => c.synth.theme_affinity,
            "text_noise" => c.synth.text_noise,
            "media_noise" => c.synth.media_noise,
            "bundle_popularity" => c.synth.bundle_popularity,
            "anchor_popularity" => c.synth.anchor_popularity,
            "unit_features" => c.synth.unit_features,
        ]);
        keys.extend([
            Key {
                name: "bundle_size",
                get: |c| format!("{},{}", c.synth.bundle_size.0, c.synth.bundle_size.1),
                set: |c, v| {
                    c.synth.bundle_size = pair(v)?;
                    Ok(())
                },
            },
            Key {
                name: "user_items",
                get: |c| format!("{},{}", c.synth.user_items.0, c.synth.user_items.1),
                set: |c, v| {
                    c.synth.user_items = pair(v)?;
                    Ok(())
                },
            },
        ]);
        keys.extend(keys![
            "feedback_dim" => c.feedback.dim,
            "feedback_layers" => c.feedback.layers,
            "feedback_epochs" => c.feedback.epochs,
            "feedback_lr" => c.feedback.lr,
            "feedback_negatives" => c.feedback.neg_per_pos,
            "feedback_batch_size" => c.feedback.batch_size,
            "feedback_l2" => c.feedback.l2,
            "dim" => c.train.dim,
            "item_layers" => c.train.item_layers,
            "bundle_layers" => c.train.bundle_layers,
            "temperature" => c.train.temperature,
            "lambda" => c.train.lambda,
            "beta" => c.train.beta,
            "lr" => c.train.lr,
            "batch_size" => c.train.batch_size,
            "epochs" => c.train.epochs,
            "patience" => c.train.patience,
            "teacher_lr" => c.train.teacher_lr,
            "teacher_epochs" => c.train.teacher_epochs,
            "distill" => c.train.distill,
            "kd_direction" => c.train.kd_direction,
            "feature_sim" => c.train.feature_sim,
            "fusion" => c.train.fusion,
            "head_ratio" => c.head_ratio,
            "tail_ratio" => c.tail_ratio,
            "scenarios" => c.scenarios: list,
            "ks" => c.ks: list,
            "sweep_ratios" => c.sweep_ratios: list,
            "hist_bins" => c.hist_bins,
            "case_k" => c.case_k,
            "case_count" => c.case_count,
        ]);
        keys
    }

    /// Parses config text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let keys = Self::keys();
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = keys
                .iter()
                .find(|key| key.name == k)
                .ok_or_else(|| err(format!("unknown key `{k}`")))?;
            (key.set)(&mut cfg, v).map_err(|e| err(format!("bad value `{v}` for `{k}`: {e}")))?;
        }
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }

    /// Every key with its current value, one per line.
    pub fn dump(&self) -> String {
        Self::keys()
            .iter()
            .map(|k| format!("{}={}\n", k.name, (k.get)(self)))
            .collect()
    }

    /// Overrides one key as if it appeared in the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let keys = Self::keys();
        let k = keys
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        (k.set)(self, value).map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))?;
        self.sync_seeds();
        self.validate()
    }

    /// Pushes the root seed into every stage config.
    pub fn sync_seeds(&mut self) {
        use bundleforge::numerics::{derive_seed, Stage};
        self.synth.seed = derive_seed(self.seed, Stage::Synth);
        self.feedback.seed = derive_seed(self.seed, Stage::Feedback);
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let ratio = |r: f64| r > 0.0 && r < 1.0;
        if !ratio(self.head_ratio) || !ratio(self.tail_ratio) || self.head_ratio + self.tail_ratio > 1.0 {
            return bad("head_ratio and tail_ratio must be in (0, 1) with a sum <= 1");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must list positive cutoffs");
        }
        if self.scenarios.is_empty() {
            return bad("scenarios must not be empty");
        }
        if self.sweep_ratios.iter().any(|&r| !(r > 0.0 && r <= 0.5)) {
            return bad("sweep_ratios must lie in (0, 0.5]");
        }
        if self.hist_bins == 0 || self.case_k == 0 {
            return bad("hist_bins and case_k must be >= 1");
        }
        if self.feedback.dim == 0 || self.feedback.batch_size == 0 || self.feedback.neg_per_pos == 0 {
            return bad("feedback_dim, feedback_batch_size and feedback_negatives must be >= 1");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
}

fn pair(v: &str) -> std::result::Result<(usize, usize), String> {
    match parse_list::<usize>(v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err("expected two comma-separated integers".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bundleforge::diet::DistillMode;

    fn parse_str(s: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(s, Path::new("test.cfg"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_str("").unwrap();
        assert_eq!(c.train.temperature, 2.0);
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.train.beta, 1e-5);
        assert_eq!(c.train.dim, 64);
        let mut d = ExperimentConfig::default();
        d.sync_seeds();
        assert_eq!(c, d);
    }

    #[test]
    fn values_comments_and_lists() {
        let c = parse_str(
            "# experiment\n\ntemperature = 3   # hotter\ndistill=none\nscenarios=overall,pop2lt\nks=10,20\nbundle_size=2,3\ndata=/tmp/x\n",
        )
        .unwrap();
        assert_eq!(c.train.temperature, 3.0);
        assert_eq!(c.train.distill, DistillMode::None);
        assert_eq!(c.scenarios, vec![Scenario::Overall, Scenario::PopToLt]);
        assert_eq!(c.ks, vec![10, 20]);
        assert_eq!(c.synth.bundle_size, (2, 3));
        assert_eq!(c.data_dir(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = parse_str("seed=1\n\nwarp_factor=9\n").unwrap_err().to_string();
        assert!(e.contains("test.cfg:3") && e.contains("warp_factor"), "{e}");
        let e = parse_str("lambda=lots\n").unwrap_err().to_string();
        assert!(e.contains(":1") && e.contains("lambda"), "{e}");
        assert!(parse_str("no equals sign\n").is_err());
    }

    #[test]
    fn temperature_bounds() {
        assert!(parse_str("temperature=3").is_ok());
        assert!(parse_str("temperature=0").is_err());
        assert!(parse_str("head_ratio=0.6\ntail_ratio=0.6").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let c = parse_str("seed=9\nbeta=0.00003\nfusion=wo_mm\nsweep_ratios=0.5,0.25\nunit_features=false\n").unwrap();
        let again = parse_str(&c.dump()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.dump(), c.dump());
        assert_eq!(again.synth.seed, 9 ^ 1);
    }

    #[test]
    fn every_key_is_unique_and_dumped() {
        let keys = ExperimentConfig::keys();
        let mut names: Vec<_> = keys.iter().map(|k| k.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), keys.len());
        assert_eq!(ExperimentConfig::default().dump().lines().count(), keys.len());
    }
}
