//! `svattack` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svattack::attack::AttackSetting;
use svattack::audio::FeatureKind;
use svattack::config::{parse_epsilons, ExperimentConfig, Profile};
use svattack::Error;

#[derive(Parser, Debug)]
#[command(name = "svattack", version, about = "Adversarial attacks on i-vector and x-vector speaker verification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML overlay applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated ε sweep, e.g. `0,0.3,1`.
    #[arg(long, global = true)]
    epsilons: Option<String>,
    #[arg(long, global = true, value_enum)]
    setting: Option<SettingArg>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
pub enum SettingArg {
    WhiteBox,
    CrossFeature,
    CrossModel,
    CrossFeatureModel,
}

impl From<SettingArg> for AttackSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::WhiteBox => AttackSetting::WhiteBox,
            SettingArg::CrossFeature => AttackSetting::CrossFeature,
            SettingArg::CrossModel => AttackSetting::CrossModel,
            SettingArg::CrossFeatureModel => AttackSetting::CrossFeatureModel,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum KindArg {
    Mfcc,
    Lpms,
}

impl From<KindArg> for FeatureKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mfcc => FeatureKind::Mfcc,
            KindArg::Lpms => FeatureKind::Lpms,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Eval,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/eval corpora (WAVs or features, speakers, trials).
    Synth {
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
    },
    /// Extract MFCC and LPMS (with phase) from `<corpus>/wav/*.wav` into a feature store.
    ExtractFeatures {
        /// Directory holding `wav/` and optionally `speakers.txt`.
        corpus: PathBuf,
    },
    /// Train a UBM on labelled utterances of a feature store.
    TrainUbm {
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = KindArg::Mfcc)]
        features: KindArg,
    },
    /// Train a total variability matrix on top of a UBM archive.
    TrainTv {
        store: PathBuf,
        #[arg(long)]
        ubm: PathBuf,
    },
    /// Train the toy x-vector network on MFCC.
    TrainXvec { store: PathBuf },
    /// Train the LDA projection on top of an x-vector archive.
    TrainLda {
        store: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train centering mean and PLDA, producing a complete scoring system.
    TrainPlda {
        store: PathBuf,
        /// T-matrix archive (i-vector) or LDA archive (x-vector).
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a trial list on one system.
    Score {
        system: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Craft FGSM perturbations on `source` and score them on `target`.
    Attack {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Summarise score tables written by `attack` (EER, FAR, FRR per ε).
    Evaluate {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
    },
    /// Write original / adversarial WAV pairs from an LPMS system.
    ExportWav {
        source: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Number of trials to export.
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Synthesize, train all three systems and run every campaign.
    Experiment,
}

impl Global {
    /// Built-in profile < config file < command-line flags.
    pub fn config(&self) -> Result<ExperimentConfig, Error> {
        let profile = match self.profile {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        };
        let mut cfg = ExperimentConfig::load(profile, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(e) = &self.epsilons {
            cfg.epsilons = parse_epsilons(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn setting(&self) -> Option<AttackSetting> {
        self.setting.map(Into::into)
    }

    pub fn out(&self) -> Result<&std::path::Path, Error> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Argument("--out is required for this command".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(1)
        }
    }
}
