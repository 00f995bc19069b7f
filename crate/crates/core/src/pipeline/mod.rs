//! End-to-end generation and evaluation over a loaded artifact set.
//!
//! A [`Pipeline`] bundles the base model with an optional retrieval stack
//! (datastore, retriever backend, key transform) and a combiner. Every
//! artifact is checked against the others when the pipeline is assembled,
//! so decoding never starts on inconsistent inputs.

pub mod bleu;
mod decode;
mod eval;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bleu::{corpus_bleu, BleuScore, BLEU_EPSILON, BLEU_SMOOTHING};
pub use decode::{Generation, StepRecord};
pub use eval::{EvalMeta, EvalMode, EvalReport};

use crate::combiner::{self, Combiner, CombinerConfig, MetaNet};
use crate::compression::PcaTransform;
use crate::datastore::{Datastore, TransformRecord};
use crate::error::{Error, Result};
use crate::fingerprint::to_hex;
use crate::model::BaseModel;
use crate::retriever::{self, ExactRetriever, NeighborSet, Query, Retriever, RetrieverSpec};
use crate::vocab::Vocab;

/// Artifact paths and decoding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: PathBuf,
    /// Without a datastore the pipeline decodes with the base model alone.
    pub datastore: Option<PathBuf>,
    pub ivf: Option<PathBuf>,
    pub nprobe: Option<usize>,
    pub pca: Option<PathBuf>,
    pub metanet: Option<PathBuf>,
    pub combiner: CombinerConfig,
    pub beam: usize,
    pub max_len: usize,
}

impl PipelineConfig {
    pub const DEFAULT_BEAM: usize = 1;
    pub const DEFAULT_MAX_LEN: usize = 32;

    pub fn new(model: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            datastore: None,
            ivf: None,
            nprobe: None,
            pca: None,
            metanet: None,
            combiner: CombinerConfig::default(),
            beam: Self::DEFAULT_BEAM,
            max_len: Self::DEFAULT_MAX_LEN,
        }
    }
}

/// Summary of a datastore for reports and the service.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatastoreStats {
    pub n: usize,
    pub dim: usize,
    pub scale: f64,
    pub corpus: String,
    pub transforms: Vec<String>,
    pub chain: Vec<TransformRecord>,
    pub fingerprint: String,
}

impl DatastoreStats {
    pub fn of(ds: &Datastore) -> Self {
        Self {
            n: ds.len(),
            dim: ds.dim(),
            scale: ds.meta().scale(),
            corpus: ds.meta().corpus.clone(),
            transforms: ds.meta().transform_kinds().into_iter().map(String::from).collect(),
            chain: ds.meta().transforms.clone(),
            fingerprint: to_hex(ds.fingerprint()),
        }
    }
}

/// Datastore plus the machinery to query it with model states.
#[derive(Clone)]
pub struct Retrieval {
    datastore: Arc<Datastore>,
    retriever: Arc<dyn Retriever>,
    pca: Option<Arc<PcaTransform>>,
}

impl Retrieval {
    /// Checks that `pca` is exactly the transform recorded in the store's
    /// chain and that the retriever's index belongs to the store.
    pub fn new(
        datastore: Arc<Datastore>,
        retriever: Arc<dyn Retriever>,
        pca: Option<Arc<PcaTransform>>,
    ) -> Result<Self> {
        if datastore.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        let recorded: Vec<&str> = datastore
            .meta()
            .transforms
            .iter()
            .filter(|t| t.kind == "pca")
            .filter_map(|t| t.params.get("fingerprint").and_then(|v| v.as_str()))
            .collect();
        match (&pca, recorded.as_slice()) {
            (None, []) => {}
            (Some(p), [fp]) => {
                let found = to_hex(p.fingerprint());
                if found != *fp {
                    return Err(Error::FingerprintMismatch {
                        what: "pca",
                        expected: fp.to_string(),
                        found,
                    });
                }
                if p.dim_out() != datastore.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: datastore.dim(),
                        got: p.dim_out(),
                    });
                }
            }
            (None, _) => return Err(Error::param("the datastore keys are PCA-projected; a pca file is required")),
            (Some(_), []) => return Err(Error::param("a pca file was given but the datastore was not projected")),
            (Some(_), _) => return Err(Error::param("the datastore records more than one pca transform")),
        }
        retriever.check(&datastore)?;
        Ok(Self {
            datastore,
            retriever,
            pca,
        })
    }

    /// Brute-force retrieval over an untransformed store.
    pub fn exact(datastore: Arc<Datastore>) -> Result<Self> {
        Self::new(datastore, Arc::new(ExactRetriever), None)
    }

    pub fn datastore(&self) -> &Arc<Datastore> {
        &self.datastore
    }

    pub fn retriever(&self) -> &Arc<dyn Retriever> {
        &self.retriever
    }

    pub fn pca(&self) -> Option<&Arc<PcaTransform>> {
        self.pca.as_ref()
    }

    /// Dimension of the model states this stack accepts.
    pub fn input_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.datastore.dim(), |p| p.dim_in())
    }

    /// Maps a model state into key space.
    pub fn query_vector(&self, state: Vec<f32>) -> Result<Vec<f32>> {
        match &self.pca {
            Some(p) => p.apply(&state),
            None => Ok(state),
        }
    }

    pub fn search(&self, vector: Vec<f32>, k: usize) -> Result<NeighborSet> {
        self.retriever.search(&self.datastore, &Query::new(vector, k)?)
    }
}

/// A fully validated, immutable decoding setup. Cheap to clone.
#[derive(Clone)]
pub struct Pipeline {
    model: Arc<BaseModel>,
    retrieval: Option<Retrieval>,
    metanet: Option<Arc<MetaNet>>,
    combiner_config: CombinerConfig,
    combiner: Option<Arc<dyn Combiner>>,
    beam: usize,
    max_len: usize,
}

impl Pipeline {
    pub fn new(
        model: Arc<BaseModel>,
        retrieval: Option<Retrieval>,
        metanet: Option<Arc<MetaNet>>,
        combiner_config: CombinerConfig,
        beam: usize,
        max_len: usize,
    ) -> Result<Self> {
        if beam == 0 {
            return Err(Error::param("beam width must be at least 1"));
        }
        if max_len == 0 {
            return Err(Error::param("max length must be at least 1"));
        }
        combiner_config.validate()?;
        let combiner = match &retrieval {
            Some(r) => {
                r.datastore.check_model(&model)?;
                if r.input_dim() != model.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: model.dim(),
                        got: r.input_dim(),
                    });
                }
                if combiner_config.k > r.datastore.len() {
                    return Err(Error::param(format!(
                        "k={} exceeds the datastore size {}",
                        combiner_config.k,
                        r.datastore.len()
                    )));
                }
                let c: Arc<dyn Combiner> = Arc::from(combiner::build(&combiner_config, metanet.as_ref())?);
                Some(c)
            }
            None => None,
        };
        Ok(Self {
            model,
            retrieval,
            metanet,
            combiner_config,
            combiner,
            beam,
            max_len,
        })
    }

    /// Decodes with the base model only.
    pub fn base_only(model: Arc<BaseModel>, beam: usize, max_len: usize) -> Result<Self> {
        Self::new(model, None, None, CombinerConfig::default(), beam, max_len)
    }

    /// Loads and cross-checks every artifact named in `cfg`.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let model = Arc::new(BaseModel::load(&cfg.model)?);
        let retrieval = match &cfg.datastore {
            Some(path) => {
                let ds = Arc::new(Datastore::load(path)?);
                let spec = RetrieverSpec {
                    index_path: cfg.ivf.clone(),
                    nprobe: cfg.nprobe,
                };
                let backend = if cfg.ivf.is_some() { "ivf" } else { "exact" };
                let retriever: Arc<dyn Retriever> = Arc::from((retriever::registry().get(backend)?)(&spec)?);
                let pca = cfg.pca.as_ref().map(PcaTransform::load).transpose()?.map(Arc::new);
                Some(Retrieval::new(ds, retriever, pca)?)
            }
            None => {
                if cfg.ivf.is_some() || cfg.pca.is_some() {
                    return Err(Error::param("ivf and pca files need a datastore"));
                }
                None
            }
        };
        let metanet = cfg.metanet.as_ref().map(MetaNet::load).transpose()?.map(Arc::new);
        Self::new(model, retrieval, metanet, cfg.combiner.clone(), cfg.beam, cfg.max_len)
    }

    /// Same artifacts, different combiner settings.
    pub fn with_combiner(&self, cfg: CombinerConfig) -> Result<Self> {
        Self::new(
            Arc::clone(&self.model),
            self.retrieval.clone(),
            self.metanet.clone(),
            cfg,
            self.beam,
            self.max_len,
        )
    }

    /// Same artifacts, different beam width and length limit.
    pub fn with_decoding(&self, beam: usize, max_len: usize) -> Result<Self> {
        Self::new(
            Arc::clone(&self.model),
            self.retrieval.clone(),
            self.metanet.clone(),
            self.combiner_config.clone(),
            beam,
            max_len,
        )
    }

    /// Same artifacts with a different datastore retrieval stack.
    pub fn with_retrieval(&self, retrieval: Option<Retrieval>) -> Result<Self> {
        Self::new(
            Arc::clone(&self.model),
            retrieval,
            self.metanet.clone(),
            self.combiner_config.clone(),
            self.beam,
            self.max_len,
        )
    }

    pub fn model(&self) -> &Arc<BaseModel> {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        self.model.vocab()
    }

    pub fn retrieval(&self) -> Option<&Retrieval> {
        self.retrieval.as_ref()
    }

    pub fn datastore(&self) -> Option<&Arc<Datastore>> {
        self.retrieval.as_ref().map(|r| &r.datastore)
    }

    pub fn metanet(&self) -> Option<&Arc<MetaNet>> {
        self.metanet.as_ref()
    }

    pub fn combiner_config(&self) -> &CombinerConfig {
        &self.combiner_config
    }

    pub fn combiner(&self) -> Option<&Arc<dyn Combiner>> {
        self.combiner.as_ref()
    }

    pub fn beam(&self) -> usize {
        self.beam
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn datastore_stats(&self) -> Option<DatastoreStats> {
        self.datastore().map(|ds| DatastoreStats::of(ds))
    }
}
