//! Frozen class-centroid text priors and their learnable projection into the
//! encoder's query array.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Split};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::numerics::{cast, mean_rows, zscore_normalize, Init, Mlp, ParamStore, Real, Tape, Var};

pub const PRIOR_NORMAL: &str = "prior.normal";
pub const PRIOR_DISORDER: &str = "prior.disorder";

/// Mean-pooled transcript embedding of one participant.
pub fn text_representation<F: Real>(text: &Array2<F>) -> Array1<F> {
    mean_rows(text)
}

/// Z-scores every representation independently, then averages them.
pub fn compute_category_prior<F: Real>(reps: &[Array1<F>]) -> Result<Array1<F>> {
    let first = reps
        .first()
        .ok_or_else(|| Error::Corpus("category has no training samples".into()))?;
    let width = first.len();
    let mut acc = Array1::<f64>::zeros(width);
    for r in reps {
        if r.len() != width {
            return Err(Error::data(format!(
                "text representation width {} differs from {width}",
                r.len()
            )));
        }
        acc += &zscore_normalize(r.view()).mapv(|v| v.as_f64());
    }
    let n = reps.len() as f64;
    Ok(acc.mapv(|v| F::from_f64_lossy(v / n)))
}

/// The two class centroids, kept in full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPriors {
    pub normal: Vec<f64>,
    pub disorder: Vec<f64>,
    /// Training participants contributing to each centroid (normal, disorder).
    pub counts: [usize; 2],
}

impl CategoryPriors {
    pub fn from_representations(normal: &[Array1<f64>], disorder: &[Array1<f64>]) -> Result<Self> {
        let n = compute_category_prior(normal)
            .map_err(|_| Error::Corpus("category `normal` has no training samples".into()))?;
        let d = compute_category_prior(disorder)
            .map_err(|_| Error::Corpus("category `disorder` has no training samples".into()))?;
        if n.len() != d.len() {
            return Err(Error::data("category priors differ in width"));
        }
        Ok(Self {
            normal: n.to_vec(),
            disorder: d.to_vec(),
            counts: [normal.len(), disorder.len()],
        })
    }

    /// Builds the priors from the training split's transcript features only.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let mut normal = Vec::new();
        let mut disorder = Vec::new();
        for rec in corpus.split(Split::Train) {
            let Some(text) = &rec.text_features else {
                continue;
            };
            let rep = text_representation(&cast::<f32, f64>(text));
            match rec.label {
                Label::Normal => normal.push(rep),
                Label::Disorder => disorder.push(rep),
            }
        }
        Self::from_representations(&normal, &disorder)
    }

    pub fn width(&self) -> usize {
        self.normal.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = read_json(path)?;
        if p.normal.len() != p.disorder.len() || p.normal.is_empty() {
            return Err(Error::data(format!("{}: malformed prior file", path.display())));
        }
        Ok(p)
    }

    fn row<F: Real>(v: &[f64]) -> Array2<F> {
        Array1::from_iter(v.iter().map(|&x| F::from_f64_lossy(x)))
            .insert_axis(Axis(0))
    }
}

/// Frozen prior rows plus the learnable text-width → latent-width projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPriorPair {
    pub normal: String,
    pub disorder: String,
    pub projection: Mlp,
    pub text_width: usize,
    pub latent_width: usize,
}

impl CategoryPriorPair {
    pub fn register<F: Real>(
        params: &mut ParamStore<F>,
        priors: &CategoryPriors,
        latent_width: usize,
        init: Init,
    ) -> Result<Self> {
        let text_width = priors.width();
        params.insert(PRIOR_NORMAL, CategoryPriors::row(&priors.normal), false)?;
        params.insert(PRIOR_DISORDER, CategoryPriors::row(&priors.disorder), false)?;
        let projection = Mlp::register(params, "prior_proj", text_width, latent_width, init)?;
        Ok(Self {
            normal: PRIOR_NORMAL.into(),
            disorder: PRIOR_DISORDER.into(),
            projection,
            text_width,
            latent_width,
        })
    }

    /// The 2×D prior embedding; row 0 from the normal prior, row 1 from the disorder prior.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>) -> Result<Var> {
        let n = tape.param(&self.normal)?;
        let d = tape.param(&self.disorder)?;
        for v in [n, d] {
            if tape.shape(v) != (1, self.text_width) {
                return Err(Error::config(format!(
                    "prior has shape {:?}, projection expects 1x{}",
                    tape.shape(v),
                    self.text_width
                )));
            }
        }
        let pair = tape.concat_rows(&[n, d])?;
        self.projection.forward(tape, pair)
    }
}

pub fn build_prior_embedding<F: Real>(pair: &CategoryPriorPair, params: &ParamStore<F>) -> Result<Array2<F>> {
    let mut tape = Tape::new(params);
    let p = pair.forward(&mut tape)?;
    Ok(tape.value(p).to_owned())
}
