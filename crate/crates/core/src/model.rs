//! A fitted model of any kind behind one scoring and persistence interface.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{CoxLinear, CoxMixture, CoxNonlinear, WeibullPH};
use crate::error::{Error, Result};
use crate::features::{MessageObservation, DENSE_DIM};
use crate::numerics::{ModelFile, ParamStore, Tensor};
use crate::rnn::RnnSurvivalModel;
use crate::virtual_time::BinScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Weibull,
    CphL,
    CphG,
    CphMm,
    RnnS,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Weibull,
        ModelKind::CphL,
        ModelKind::CphG,
        ModelKind::CphMm,
        ModelKind::RnnS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Weibull => "weibull",
            ModelKind::CphL => "cph_l",
            ModelKind::CphG => "cph_g",
            ModelKind::CphMm => "cph_mm",
            ModelKind::RnnS => "rnn_s",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (expected one of weibull, cph_l, cph_g, cph_mm, rnn_s)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Weibull(WeibullPH),
    CoxLinear(CoxLinear),
    CoxNonlinear(CoxNonlinear),
    CoxMixture(CoxMixture),
    Rnn(RnnSurvivalModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaselineMeta {
    seq_len: usize,
    scheme_hash: Option<String>,
}

fn row(values: &[f64]) -> Tensor {
    Tensor::matrix(1, values.len(), values.to_vec()).expect("row shape")
}

impl FittedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FittedModel::Weibull(_) => ModelKind::Weibull,
            FittedModel::CoxLinear(_) => ModelKind::CphL,
            FittedModel::CoxNonlinear(_) => ModelKind::CphG,
            FittedModel::CoxMixture(_) => ModelKind::CphMm,
            FittedModel::Rnn(_) => ModelKind::RnnS,
        }
    }

    /// Ranking score of an averaged-feature row: `phi` for the Cox models,
    /// `lambda` for Weibull and `w lambda` for the mixture.
    pub fn score_row(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedModel::Weibull(m) => m.lambda(x),
            FittedModel::CoxLinear(m) => m.phi(x),
            FittedModel::CoxNonlinear(m) => m.phi(x),
            FittedModel::CoxMixture(m) => m.ranking_score(x),
            FittedModel::Rnn(_) => Err(Error::InvalidParameter("rnn_s scores sequences, not averaged rows".into())),
        }
    }

    /// Logarithm of [`FittedModel::score_row`], finite where the score
    /// itself would underflow.
    pub fn log_score_row(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedModel::Weibull(m) => m.log_lambda(x),
            FittedModel::CoxLinear(m) => m.log_phi(x),
            FittedModel::CoxNonlinear(m) => m.log_phi(x),
            FittedModel::CoxMixture(m) => m.log_ranking_score(x),
            FittedModel::Rnn(_) => Err(Error::InvalidParameter("rnn_s scores sequences, not averaged rows".into())),
        }
    }

    /// Scores of a next message for every bin. `prefix` holds the
    /// recipient's earlier observations and `dense` the next message's
    /// dense features. Baselines average the last `seq_len - 1` prefix
    /// observations with the next message; the LSTM runs over them.
    pub fn next_scores(
        &self,
        prefix: &[MessageObservation],
        dense: &[f64; DENSE_DIM],
        bin_count: usize,
        seq_len: usize,
    ) -> Result<Vec<f64>> {
        let keep = seq_len.saturating_sub(1);
        let context = &prefix[prefix.len().saturating_sub(keep)..];
        if let FittedModel::Rnn(m) = self {
            let inputs: Vec<Vec<f64>> = context.iter().map(|o| o.features.to_vec()).collect();
            let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            return m.score_next_bins(&refs, dense, bin_count);
        }
        let mut sum = *dense;
        for o in context {
            for (s, v) in sum.iter_mut().zip(o.features.dense()) {
                *s += v;
            }
        }
        let n = (context.len() + 1) as f64;
        let mut x: Vec<f64> = sum.iter().map(|s| s / n).collect();
        x.resize(DENSE_DIM + bin_count, 0.0);
        (0..bin_count)
            .map(|b| {
                x[DENSE_DIM + b] = 1.0;
                let s = self.score_row(&x);
                x[DENSE_DIM + b] = 0.0;
                s
            })
            .collect()
    }

    /// Writes a model file carrying the scheme hash and sequence length.
    pub fn save(&self, path: &Path, scheme: Option<&BinScheme>, seq_len: usize) -> Result<()> {
        let meta = BaselineMeta {
            seq_len,
            scheme_hash: scheme.map(BinScheme::hash),
        };
        let mut p = ParamStore::new();
        match self {
            FittedModel::Rnn(m) => {
                let mut m = m.clone();
                if let Some(s) = scheme {
                    m.set_scheme(s);
                }
                return m.save(path);
            }
            FittedModel::Weibull(m) => {
                p.insert("gamma", Tensor::scalar(m.gamma));
                p.insert("beta0", Tensor::scalar(m.beta0));
                p.insert("beta", row(&m.beta));
            }
            FittedModel::CoxLinear(m) => p.insert("beta", row(&m.beta)),
            FittedModel::CoxNonlinear(m) => p = m.params().clone(),
            FittedModel::CoxMixture(m) => {
                p.insert("incidence0", Tensor::scalar(m.incidence0));
                p.insert("incidence", row(&m.incidence));
                p.insert("gamma", Tensor::scalar(m.susceptible.gamma));
                p.insert("beta0", Tensor::scalar(m.susceptible.beta0));
                p.insert("beta", row(&m.susceptible.beta));
            }
        }
        ModelFile::new(self.kind().as_str(), serde_json::to_value(meta)?, &p).save(path)
    }

    /// Loads a model file, returning the model, its sequence length and the
    /// scheme hash it was trained against.
    pub fn load(path: &Path) -> Result<LoadedModel> {
        let file = ModelFile::load(path)?;
        let kind: ModelKind = file.model_kind.parse()?;
        if kind == ModelKind::RnnS {
            let m = RnnSurvivalModel::from_file(&file)?;
            return Ok(LoadedModel {
                seq_len: m.seq_len(),
                scheme_hash: m.scheme_hash().map(str::to_string),
                model: FittedModel::Rnn(m),
            });
        }
        let meta: BaselineMeta = serde_json::from_value(file.meta.clone())?;
        let p = file.params()?;
        let scalar = |n: &str| -> Result<f64> { Ok(p.require(n)?.values()[0]) };
        let vector = |n: &str| -> Result<Vec<f64>> { Ok(p.require(n)?.values().to_vec()) };
        let model = match kind {
            ModelKind::Weibull => FittedModel::Weibull(WeibullPH {
                gamma: scalar("gamma")?,
                beta0: scalar("beta0")?,
                beta: vector("beta")?,
            }),
            ModelKind::CphL => FittedModel::CoxLinear(CoxLinear { beta: vector("beta")? }),
            ModelKind::CphG => FittedModel::CoxNonlinear(CoxNonlinear::from_params(p.clone())?),
            ModelKind::CphMm => FittedModel::CoxMixture(CoxMixture {
                incidence0: scalar("incidence0")?,
                incidence: vector("incidence")?,
                susceptible: WeibullPH {
                    gamma: scalar("gamma")?,
                    beta0: scalar("beta0")?,
                    beta: vector("beta")?,
                },
            }),
            ModelKind::RnnS => unreachable!("handled above"),
        };
        Ok(LoadedModel {
            model,
            seq_len: meta.seq_len,
            scheme_hash: meta.scheme_hash,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub model: FittedModel,
    pub seq_len: usize,
    pub scheme_hash: Option<String>,
}

impl LoadedModel {
    /// Refuses a scheme other than the one recorded in the model file.
    pub fn check_scheme(&self, scheme: &BinScheme) -> Result<()> {
        match &self.scheme_hash {
            Some(h) if *h != scheme.hash() => Err(Error::SchemeMismatch {
                expected: h.clone(),
                actual: scheme.hash(),
            }),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_models(dim: usize) -> Vec<FittedModel> {
        let weibull = WeibullPH {
            gamma: 0.9,
            beta0: -1.0,
            beta: (0..dim).map(|i| i as f64 * 0.01).collect(),
        };
        vec![
            FittedModel::Weibull(weibull.clone()),
            FittedModel::CoxLinear(CoxLinear {
                beta: (0..dim).map(|i| -(i as f64) * 0.02).collect(),
            }),
            FittedModel::CoxNonlinear(CoxNonlinear::init(dim, 3, 1)),
            FittedModel::CoxMixture(CoxMixture {
                incidence0: 0.3,
                incidence: vec![0.05; dim],
                susceptible: weibull,
            }),
            FittedModel::Rnn(RnnSurvivalModel::init(dim, 3, 4, 2)),
        ]
    }

    #[test]
    fn kinds_parse_and_reject_unknown() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!(matches!("deepsurv".parse::<ModelKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip_every_kind() {
        let dir = tempfile::tempdir().unwrap();
        let scheme = BinScheme::uniform(4).unwrap();
        for (i, m) in all_models(DENSE_DIM + 4).into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.json"));
            m.save(&path, Some(&scheme), 4).unwrap();
            let back = FittedModel::load(&path).unwrap();
            assert_eq!(back.model.kind(), m.kind());
            assert_eq!(back.seq_len, 4);
            back.check_scheme(&scheme).unwrap();
            assert!(back.check_scheme(&BinScheme::uniform(5).unwrap()).is_err());
            let dense = [0.5, 0.0, 1.0, 0.2, 1.0, 0.0, 0.0, 1.0];
            let a = m.next_scores(&[], &dense, 4, 4).unwrap();
            let b = back.model.next_scores(&[], &dense, 4, 4).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|s| s.is_finite() && *s > 0.0));
        }
    }
}
