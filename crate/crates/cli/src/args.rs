//! Command-line surface. Every config key has a flag whose help names the
//! key; flags override the file, the file overrides the preset.

use crate::config::{default_cuts, ArchKind, DataKind, ExperimentConfig, PartitionKind, Preset, WireKind, OUTPUT_ENV};
use crate::error::{CliError, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "collafuse", version, about = "Split-diffusion cut-point experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one (cut, seed) cell and write its checkpoints.
    Train {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate samples for one client of a trained cell into a CFDS file.
    Infer {
        #[command(flatten)]
        cell: CellArgs,
        /// Client that receives and finishes the samples.
        #[arg(long, default_value_t = 0)]
        client: usize,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Comma-separated joint labels, one per sample; default cycles over the label space.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<u32>>,
        /// Generation seed sent with the request.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Output file.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run, or resume, every (cut, seed) cell and export the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fidelity and attribute probe of a trained cell's server intermediates.
    Probe {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-client inversion attack within a trained cell.
    Invert {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long)]
        attacker: usize,
        #[arg(long)]
        victim: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rebuild run.json and results.csv from finished cells.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CellArgs {
    #[arg(long)]
    pub cut: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file; keys not present fall back to the preset.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Base values before the file and flags are applied.
    #[arg(long, value_enum, default_value_t = Preset::Quick)]
    pub preset: Preset,
    /// `output_dir`: output root [env: COLLAFUSE_OUT].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `name`: run directory under the output root.
    #[arg(long)]
    pub name: Option<String>,
    /// `steps`: diffusion length T.
    #[arg(long)]
    pub steps: Option<usize>,
    /// `cuts`: comma-separated cut points in [0, T].
    #[arg(long, value_delimiter = ',')]
    pub cuts: Option<Vec<usize>>,
    /// `seeds`: comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// `clients`: number of clients.
    #[arg(long)]
    pub clients: Option<usize>,
    /// `rounds`: training rounds per cell.
    #[arg(long)]
    pub rounds: Option<u32>,
    /// `batches_per_round`: local batches per client per round.
    #[arg(long)]
    pub batches_per_round: Option<usize>,
    /// `batch_size`: samples per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `learning_rate`: Adam step size for all nodes.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `guidance`: comma-separated loss weights per timestep (length T).
    #[arg(long, value_delimiter = ',')]
    pub guidance: Option<Vec<f64>>,
    /// `literal_renoise`: re-noise x_{t_zeta} with unconditional coefficients.
    #[arg(long)]
    pub literal_renoise: Option<bool>,
    /// `no_remap`: clients denoise on the plain timestep grid.
    #[arg(long)]
    pub no_remap: Option<bool>,
    /// `clip_x0`: clamp of the predicted clean sample while sampling; 0 disables.
    #[arg(long)]
    pub clip_x0: Option<f64>,
    /// `wire`: tensor precision on the channel.
    #[arg(long, value_enum)]
    pub wire: Option<WireKind>,
    /// `jobs`: sweep cells run concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// `dataset.kind`.
    #[arg(long, value_enum)]
    pub dataset_kind: Option<DataKind>,
    /// `dataset.samples_per_client`.
    #[arg(long)]
    pub samples_per_client: Option<usize>,
    /// `dataset.grid`: sprite side, 8 or 16.
    #[arg(long)]
    pub grid: Option<usize>,
    /// `dataset.shapes`: sprite shapes, 2 to 5.
    #[arg(long)]
    pub shapes: Option<usize>,
    /// `dataset.colors`: sprite colors, 2 to 8.
    #[arg(long)]
    pub colors: Option<usize>,
    /// `dataset.classes`: Gaussian mixture classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// `dataset.variance`: Gaussian mixture variance.
    #[arg(long)]
    pub variance: Option<f64>,
    /// `dataset.partition`.
    #[arg(long, value_enum)]
    pub partition: Option<PartitionKind>,
    /// `dataset.partition_attr`: attribute index driving the non-IID split.
    #[arg(long)]
    pub partition_attr: Option<usize>,
    /// `dataset.skew`: share of each client's data drawn from its dominant value.
    #[arg(long)]
    pub skew: Option<f64>,
    /// `model.arch`.
    #[arg(long, value_enum)]
    pub arch: Option<ArchKind>,
    /// `model.widths`: two smallconv channel widths.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// `model.hidden`: mlp hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// `model.time_embed_dim`.
    #[arg(long)]
    pub time_embed_dim: Option<usize>,
    /// `eval.client_samples`: per-client samples for client FD; 0 means all.
    #[arg(long)]
    pub client_samples: Option<usize>,
    /// `eval.intermediate_samples`: server intermediates scored; 0 means all.
    #[arg(long)]
    pub intermediate_samples: Option<usize>,
    /// `eval.inversion_samples`: per-side cap of each inversion attack.
    #[arg(long)]
    pub inversion_samples: Option<usize>,
    /// `eval.probe_split`: probe training fraction.
    #[arg(long)]
    pub probe_split: Option<f64>,
    /// `eval.probe_epochs`.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    /// `eval.probe_learning_rate`.
    #[arg(long)]
    pub probe_learning_rate: Option<f64>,
    /// `eval.probe_l2`.
    #[arg(long)]
    pub probe_l2: Option<f64>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl ConfigArgs {
    /// Preset, then file, then `COLLAFUSE_OUT`, then flags; validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        self.resolve_with_env(std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
    }

    pub fn resolve_with_env(&self, env_out: Option<PathBuf>) -> Result<ExperimentConfig> {
        let (mut c, file_cuts) = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let sets_cuts = text.parse::<toml::Table>().is_ok_and(|t| t.contains_key("cuts"));
                (ExperimentConfig::from_toml(&text, self.preset)?, sets_cuts)
            }
            None => (ExperimentConfig::preset(self.preset), false),
        };
        if let Some(o) = env_out {
            c.output_dir = o;
        }
        set! {
            self.out => c.output_dir,
            self.name => c.name,
            self.steps => c.steps,
            self.cuts => c.cuts,
            self.seeds => c.seeds,
            self.clients => c.clients,
            self.rounds => c.rounds,
            self.batches_per_round => c.batches_per_round,
            self.batch_size => c.batch_size,
            self.learning_rate => c.learning_rate,
            self.guidance => c.guidance,
            self.literal_renoise => c.literal_renoise,
            self.no_remap => c.no_remap,
            self.clip_x0 => c.clip_x0,
            self.wire => c.wire,
            self.jobs => c.jobs,
            self.dataset_kind => c.dataset.kind,
            self.samples_per_client => c.dataset.samples_per_client,
            self.grid => c.dataset.grid,
            self.shapes => c.dataset.shapes,
            self.colors => c.dataset.colors,
            self.classes => c.dataset.classes,
            self.variance => c.dataset.variance,
            self.partition => c.dataset.partition,
            self.partition_attr => c.dataset.partition_attr,
            self.skew => c.dataset.skew,
            self.arch => c.model.arch,
            self.hidden => c.model.hidden,
            self.time_embed_dim => c.model.time_embed_dim,
            self.client_samples => c.eval.client_samples,
            self.intermediate_samples => c.eval.intermediate_samples,
            self.inversion_samples => c.eval.inversion_samples,
            self.probe_split => c.eval.probe_split,
            self.probe_epochs => c.eval.probe_epochs,
            self.probe_learning_rate => c.eval.probe_learning_rate,
            self.probe_l2 => c.eval.probe_l2,
        }
        // cuts not given anywhere follow T
        if self.cuts.is_none() && !file_cuts {
            c.cuts = default_cuts(c.steps);
        }
        if let Some(w) = &self.widths {
            let &[a, b] = w.as_slice() else {
                return Err(CliError::Config(format!("--widths takes two values, got {}", w.len())));
            };
            c.model.widths = [a, b];
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_env_and_preset() {
        let cli = Cli::parse_from(["collafuse", "sweep", "--cuts", "0,50", "--rounds", "2", "--widths", "4,8", "--out", "x"]);
        let Command::Sweep { config } = cli.command else { panic!() };
        let c = config.resolve_with_env(Some("from-env".into())).unwrap();
        assert_eq!(c.cuts, vec![0, 50]);
        assert_eq!(c.rounds, 2);
        assert_eq!(c.model.widths, [4, 8]);
        assert_eq!(c.output_dir, PathBuf::from("x"));
        let c = ConfigArgs::default().resolve_with_env(Some("from-env".into())).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("from-env"));
        let cli = Cli::parse_from(["collafuse", "sweep", "--steps", "50"]);
        let Command::Sweep { config } = cli.command else { panic!() };
        assert_eq!(config.resolve_with_env(None).unwrap().cuts, vec![0, 5, 10, 15, 20, 30, 40, 50]);
    }

    #[test]
    fn help_lists_every_key() {
        let help = Cli::command().find_subcommand_mut("sweep").unwrap().render_long_help().to_string();
        let cfg = serde_json::to_value(ExperimentConfig::default()).unwrap();
        for (k, v) in cfg.as_object().unwrap() {
            let keys: Vec<String> = match v.as_object() {
                Some(inner) => inner.keys().map(|i| format!("{k}.{i}")).collect(),
                None => vec![k.clone()],
            };
            for key in keys {
                assert!(help.contains(&format!("`{key}`")), "{key} missing from --help");
            }
        }
    }
}
