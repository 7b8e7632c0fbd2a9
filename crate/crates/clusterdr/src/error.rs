//! Crate-wide error type. Variants carry enough context (cluster and member
//! indices, dimensions) to point at the offending input.

/// Errors reported by dataset validation, model fitting, and estimation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("cluster {cluster} is empty")]
    EmptyCluster { cluster: usize },

    #[error("cluster {cluster}, member {member}: outcome present but marked missing")]
    OutcomePresentButMissing { cluster: usize, member: usize },

    #[error("cluster {cluster}, member {member}: outcome absent but marked observed")]
    OutcomeAbsentButObserved { cluster: usize, member: usize },

    #[error("cluster {cluster}: cluster covariate dimension {found}, expected {expected}")]
    ClusterCovariateDim {
        cluster: usize,
        found: usize,
        expected: usize,
    },

    #[error("cluster {cluster}, member {member}: member covariate dimension {found}, expected {expected}")]
    MemberCovariateDim {
        cluster: usize,
        member: usize,
        found: usize,
        expected: usize,
    },

    #[error("cluster {cluster}: time indices must be contiguous from 0 in storage order")]
    TimeIndexInvalid { cluster: usize },

    #[error("cluster {cluster}, member {member}: non-finite {what}")]
    NonFiniteField {
        cluster: usize,
        member: usize,
        what: &'static str,
    },

    #[error("need at least {needed} clusters, found {found}")]
    TooFewClusters { needed: usize, found: usize },

    #[error("cluster index {index} out of range ({len} clusters)")]
    ClusterIndexOutOfRange { index: usize, len: usize },

    #[error("{what}: {details}")]
    InvalidParam {
        what: &'static str,
        details: String,
    },

    #[error("design matrix has {rows} rows but {labels} responses")]
    DesignResponseMismatch { rows: usize, labels: usize },

    #[error("need at least {needed} rows to fit {cols} coefficients, found {rows}")]
    TooFewRows {
        needed: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },

    #[error("labels must be 0 or 1")]
    NonBinaryLabels,

    #[error("single-class labels: logistic fit is unidentified")]
    SingleClassLabels,

    #[error("no observed outcomes in the training set")]
    NoObservedOutcomes,

    #[error("linear system is singular beyond jitter repair")]
    SingularSystem,

    #[error("custom feature map '{name}' has no registered implementation")]
    UnsupportedFeatureMap { name: String },

    #[error("coefficient vector has length {found}, expected {expected} (intercept plus features)")]
    CoefficientLength { found: usize, expected: usize },

    #[error("panel shape does not match the dataset (cluster {cluster}: {found} values, {expected} members)")]
    PanelMisaligned {
        cluster: usize,
        found: usize,
        expected: usize,
    },

    #[error("propensity value {value} is not strictly positive")]
    NonPositivePropensity { value: f64 },

    #[error("estimate is not finite")]
    NonFiniteEstimate,

    #[error("variance estimate is degenerate; refusing to build a confidence interval")]
    DegenerateVariance,

    #[error("autoregressive transition is unstable (spectral radius at or above 1)")]
    UnstableTransition,

    #[error("bootstrap resampling failed {redraws} redraws in a row; giving up")]
    BootstrapExhausted { redraws: usize },

    #[error("all {total} replications failed; first error: {first}")]
    AllReplicationsFailed { total: usize, first: String },

    #[error("internal invariant breach: {details}")]
    Internal { details: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidParam {
            what,
            details: details.into(),
        }
    }
}
