//! Post-hoc multi-modal explanations of a trained classifier: concept-based
//! text explanations, edge-mask subgraph explanations, perturbation-derived
//! mode labels and learned mode significance.

mod concepts;
mod graph;
mod perturb;
mod report;
mod significance;

pub use concepts::{concept_loss, extract_text_explanation, train_concepts, ConceptConfig, ConceptModel, ConceptTrace};
pub use graph::{
    computation_edges, edge_mask_loss, extract_subgraph, train_graph_explainer, EdgeSet, GraphExplainer,
    GraphExplainerConfig, GraphExplanation, MaskBatch,
};
pub use perturb::{perturb_and_label, perturb_and_label_all, PerturbInput, Perturbation, WithoutVertices};
pub use report::{mode_table, write_modes_tsv, ExplanationRecord, Mode};
pub use significance::{
    joint_refine, lmm_objective, train_significance, LmmBatch, LmmStep, LmmVars, RefineConfig, SignificanceConfig,
    SignificanceModel,
};

use crate::alsc::{joint_features, Head};
use crate::error::{Error, Result};
use crate::graph::{EntityGraph, NodeId};
use crate::sage::SageModel;
use crate::tape::Mat;

/// The frozen classifier `M_o` together with the subgraph encoder `M_g`.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub head: &'a Head,
    pub sage: &'a SageModel,
    /// Aspect subgraph, local ids.
    pub gs: &'a EntityGraph,
}

/// Instance-level inputs in the layout the head expects.
#[derive(Debug, Clone)]
pub struct ExplainData {
    /// `N × dim_h`.
    pub text: Mat,
    /// `N × dim_C`.
    pub zc: Mat,
    /// Local subgraph ids, `None` for UNK.
    pub entities: Vec<Option<NodeId>>,
    /// Full-neighbourhood embeddings of every subgraph node.
    pub zs: Mat,
}

impl ExplainData {
    pub fn new(m: &Frozen<'_>, text: Mat, zc: Mat, entities: Vec<Option<NodeId>>) -> Result<Self> {
        if text.nrows() != entities.len() || zc.nrows() != entities.len() {
            return Err(Error::DimMismatch {
                context: "explanation inputs",
                expected: entities.len(),
                got: text.nrows().min(zc.nrows()),
            });
        }
        let zs = m.sage.embed_all(m.gs)?;
        Ok(ExplainData { text, zc, entities, zs })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn dim_h(&self) -> usize {
        self.text.ncols()
    }

    /// `[h | z_C | z_s]` rows.
    pub fn inputs(&self) -> Mat {
        joint_features(&self.text, &self.zc, &self.zs, &self.entities)
    }

    /// `[z_C | z_s]` rows.
    pub fn graph_part(&self) -> Mat {
        let x = self.inputs();
        x.slice(ndarray::s![.., self.dim_h()..]).to_owned()
    }

    pub fn subset(&self, rows: &[usize]) -> ExplainData {
        let pick = |m: &Mat| Mat::from_shape_fn((rows.len(), m.ncols()), |(r, c)| m[[rows[r], c]]);
        ExplainData {
            text: pick(&self.text),
            zc: pick(&self.zc),
            entities: rows.iter().map(|&r| self.entities[r]).collect(),
            zs: self.zs.clone(),
        }
    }
}

impl Frozen<'_> {
    /// Class probabilities for each row of `x`.
    pub fn probs(&self, x: &Mat) -> Result<Mat> {
        self.head.predict_rows(x)
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        Ok(self.head.predict_labels(x)?.into_iter().map(|l| l.index()).collect())
    }
}
