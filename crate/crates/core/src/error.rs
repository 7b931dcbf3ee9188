use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("value does not belong to this tape")]
    Detached,

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("layer index {index} out of range for a model with {layers} layers")]
    LayerIndex { index: usize, layers: usize },

    #[error("cannot remove the only remaining layer")]
    OnlyLayer,

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("cannot draw {requested} distinct sequences per class, only {capacity} exist")]
    InfeasibleDistinctness { requested: usize, capacity: u128 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error(
        "relevance score becomes ill-defined: full-model accuracy {accuracy} does not exceed \
         the random-predictor baseline {baseline}"
    )]
    IllDefined { accuracy: f64, baseline: f64 },

    #[error("zero-norm vector at layer {layer}, instance {instance}, position {position}")]
    ZeroNorm {
        layer: usize,
        instance: usize,
        position: usize,
    },

    #[error("wrong head kind: {0}")]
    WrongHead(String),

    #[error("gradient contains non-finite values")]
    GradientNaN,

    #[error("epsilon {0} is outside the solvable range (0, 1 - 1/sqrt(2))")]
    EpsilonRange(f64),

    #[error("invalid adversarial spec: {0}")]
    AdversarialSpec(String),

    #[error("duplicate sequence at instances {first} and {second}")]
    DuplicateSequence { first: usize, second: usize },

    #[error("pruning is infeasible: {0}")]
    PruneInfeasible(String),

    #[error("pruning ratio {0} removes no layers")]
    NoOp(f64),

    #[error("{combinations} candidate subsets exceed the enumeration budget of {budget}")]
    Budget { combinations: u128, budget: u128 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("mismatched layer sets: {0}")]
    MismatchedLayers(String),

    #[error("pruning stopped after {completed} completed steps: {source}")]
    Interrupted {
        completed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
