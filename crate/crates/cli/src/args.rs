use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poisson_trick::data::{Format, Schema};
use poisson_trick::design::{ModelSpec, Term};
use poisson_trick::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "poisson-trick", version, about = "Multinomial regression through Poisson surrogate models")]
pub struct Cli {
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite a dataset in short or long layout.
    Convert(ConvertArgs),
    /// Fixed-effects multinomial model via the Poisson surrogate.
    FitFixed(FitArgs),
    /// Gamma-Poisson model for grouped data, fitted by ECM.
    FitGp(GpArgs),
    /// Random-effect predictions and fitted counts from a Gamma-Poisson fit.
    Predict(GpArgs),
    /// Draw a dataset from the Gamma-Poisson hierarchy.
    Simulate(SimulateArgs),
    /// Check the fits on this dataset against the independent oracles.
    Verify(GpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    Short,
    Long,
}

impl From<Layout> for Format {
    fn from(l: Layout) -> Format {
        match l {
            Layout::Short => Format::Short,
            Layout::Long => Format::Long,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Input layout; long when --category or --count is given, short otherwise.
    #[arg(long, alias = "from", value_enum)]
    pub format: Option<Layout>,
    /// Group id column (enables random effects).
    #[arg(long)]
    pub group: Option<String>,
    /// Observation id column.
    #[arg(long)]
    pub obs: Option<String>,
    /// Category column (long layout).
    #[arg(long)]
    pub category: Option<String>,
    /// Count column (long layout).
    #[arg(long)]
    pub count: Option<String>,
    /// Category labels in order; the count columns in short layout.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    /// Covariates to read as categorical even if numeric.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Baseline (reference) category label.
    #[arg(long)]
    pub baseline: Option<String>,
}

impl DataArgs {
    pub fn layout(&self) -> Format {
        match self.format {
            Some(l) => l.into(),
            None if self.category.is_some() || self.count.is_some() => Format::Long,
            None => Format::Short,
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            group: self.group.clone(),
            obs: self.obs.clone(),
            category: self.category.clone(),
            count: self.count.clone(),
            categories: self.categories.clone(),
            categorical: self.categorical.clone(),
            baseline: self.baseline.clone(),
            ..Schema::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model term `name[:generic|:specific]`, or an interaction `a*b[:mode]`.
    #[arg(long = "covariate")]
    pub covariates: Vec<String>,
    /// One constant per distinct covariate combination instead of per observation.
    #[arg(long)]
    pub pooled: bool,
    /// Convergence tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

impl ModelArgs {
    pub fn spec(&self, baseline: Option<&str>) -> Result<ModelSpec> {
        let terms = self.covariates.iter().map(|s| s.parse::<Term>()).collect::<Result<Vec<_>>>()?;
        let mut spec = ModelSpec::new(terms);
        if let Some(b) = baseline {
            spec = spec.with_baseline(b);
        }
        if self.pooled {
            spec = spec.pooled();
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Validation(format!("--tol must be positive, got {t}")));
            }
        }
        if self.max_iter == Some(0) {
            return Err(Error::Validation("--max-iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub output_format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output layout.
    #[arg(long, value_enum)]
    pub to: Layout,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Hold the variance parameters fixed: one value for all categories or
    /// one per non-baseline category.
    #[arg(long, value_delimiter = ',')]
    pub fix_beta: Vec<f64>,
    /// Starting value of every variance parameter.
    #[arg(long, default_value_t = 0.5)]
    pub initial_beta: f64,
    /// Skip the standard errors.
    #[arg(long)]
    pub no_se: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub groups: usize,
    #[arg(long, default_value_t = 1)]
    pub obs_per_group: usize,
    #[arg(long, default_value_t = 3)]
    pub n_categories: usize,
    /// Generated covariate `name:normal`, `name:uniform` or `name:levels=N`,
    /// optionally suffixed `:per-category`.
    #[arg(long = "variable")]
    pub variables: Vec<String>,
    /// Model term, as for the fitting commands.
    #[arg(long = "covariate")]
    pub covariates: Vec<String>,
    /// Structural coefficients in design-column order (zeros when absent).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub gamma: Vec<f64>,
    /// Random-effect variances of the non-baseline categories; none means λ ≡ 1.
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,
    /// Observation constant δ.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output layout.
    #[arg(long, value_enum, default_value_t = Layout::Long)]
    pub to: Layout,
    #[arg(long)]
    pub output: Option<PathBuf>,
}
