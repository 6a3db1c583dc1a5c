use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "avt",
    version,
    about = "Audiovisual transformer for weakly labeled sound events"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signature dataset.
    Synth(SynthArgs),
    /// Train one or more seeded runs.
    Train(TrainArgs),
    /// Score a run's snapshot ensemble at its stored threshold.
    Eval(EvalArgs),
    /// Print ensemble clip probabilities as CSV.
    Predict(PredictArgs),
    /// Export cross-attention heat maps for one clip.
    Attention(AttentionArgs),
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub audio_dim: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Sets both ends of the span-length range.
    #[arg(long)]
    pub span_length: Option<usize>,
    #[arg(long)]
    pub span_min: Option<usize>,
    #[arg(long)]
    pub span_max: Option<usize>,
    /// `both`, `audio`, `video`, `split:K` or a per-class `a,v,b,...` list.
    #[arg(long)]
    pub visibility: Option<String>,
    /// One probability for all classes or a comma list.
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("classes", self.classes.map(|v| v.to_string())),
            ("audio-dim", self.audio_dim.map(|v| v.to_string())),
            ("video-dim", self.video_dim.map(|v| v.to_string())),
            ("frames", self.frames.map(|v| v.to_string())),
            ("train", self.train.map(|v| v.to_string())),
            ("val", self.val.map(|v| v.to_string())),
            ("test", self.test.map(|v| v.to_string())),
            ("magnitude", self.magnitude.map(|v| v.to_string())),
            ("noise", self.noise.map(|v| v.to_string())),
            ("span-length", self.span_length.map(|v| v.to_string())),
            ("span-min", self.span_min.map(|v| v.to_string())),
            ("span-max", self.span_max.map(|v| v.to_string())),
            ("visibility", self.visibility.clone()),
            ("prior", self.prior.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ]
    }
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// softmax, sigmoid or normalized-sigmoid
    #[arg(long)]
    pub attention_fn: Option<String>,
    #[arg(long)]
    pub attention_eps: Option<f64>,
    /// mean or max
    #[arg(long)]
    pub aggregation: Option<String>,
    /// audio or video
    #[arg(long)]
    pub first_modality: Option<String>,
    /// audio or video
    #[arg(long)]
    pub second_modality: Option<String>,
    /// first,second | first | second | none
    #[arg(long)]
    pub pos_enc: Option<String>,
}

impl ModelFlags {
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("d-model", self.d_model.map(|v| v.to_string())),
            ("d-ff", self.d_ff.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("attention-fn", self.attention_fn.clone()),
            ("attention-eps", self.attention_eps.map(|v| v.to_string())),
            ("aggregation", self.aggregation.clone()),
            ("first-modality", self.first_modality.clone()),
            ("second-modality", self.second_modality.clone()),
            ("pos-enc", self.pos_enc.clone()),
        ]
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Snapshots kept for ensembling.
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub max_ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long)]
    pub runs: Option<usize>,
}

impl TrainArgs {
    pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        let mut pairs = vec![
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch-size", self.batch_size.map(|v| v.to_string())),
            ("batches-per-epoch", self.batches_per_epoch.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("ensemble", self.ensemble.map(|v| v.to_string())),
            ("max-ratio", self.max_ratio.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("runs", self.runs.map(|v| v.to_string())),
        ];
        pairs.extend(self.model.pairs());
        pairs
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// val or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Manifest to use instead of the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Restrict output to one clip.
    #[arg(long)]
    pub clip: Option<String>,
    /// Emit 0/1 decisions at the stored threshold instead of probabilities.
    #[arg(long)]
    pub binary: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub clip: String,
    /// Decoder block, counted from 0; defaults to the last.
    #[arg(long)]
    pub block: Option<usize>,
    /// Snapshot epoch; defaults to the latest.
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub audio_dim: usize,
    #[arg(long, default_value_t = 6)]
    pub video_dim: usize,
    /// One attention function; all three when omitted.
    #[arg(long)]
    pub attention_fn: Option<String>,
    #[arg(long, default_value = "mean")]
    pub aggregation: String,
    #[arg(long, default_value = "first,second")]
    pub pos_enc: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}
