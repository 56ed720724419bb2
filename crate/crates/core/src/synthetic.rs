//! Small simulated datasets for the four model archetypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::{Column, Dataset};
use crate::model::{Hyperparameters, ModelSpec, ResponseKind, ResponseSpec, TensorDimension, TermSpec};
use crate::refdist::{raw, ReferenceDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    ShiftCount,
    HurdleCount,
    ProportionalOrdinal,
    /// Category-specific smooth plus a tensor smooth.
    NonProportionalOrdinal,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::ShiftCount,
        Archetype::HurdleCount,
        Archetype::ProportionalOrdinal,
        Archetype::NonProportionalOrdinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::ShiftCount => "shift count",
            Archetype::HurdleCount => "hurdle count",
            Archetype::ProportionalOrdinal => "proportional ordinal",
            Archetype::NonProportionalOrdinal => "non-proportional ordinal with tensor",
        }
    }
}

fn response(kind: ResponseKind, categories: Option<usize>) -> ResponseSpec {
    ResponseSpec {
        kind,
        column: "y".into(),
        reference: ReferenceDistribution::StandardLogistic,
        levels: None,
        categories,
    }
}

fn count_baseline() -> TermSpec {
    TermSpec::BaselineCount {
        dimension: 8,
        transform: Default::default(),
        hyperparameters: Hyperparameters::default(),
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|c| c.to_string()).collect()
}

/// Ordinal draw from a latent logistic model with cut points `cuts`.
fn ordinal_draw(rng: &mut impl Rng, eta: f64, cuts: &[f64]) -> usize {
    let u: f64 = rng.random();
    let latent = raw::quantile(ReferenceDistribution::StandardLogistic, u) + eta;
    1 + cuts.iter().filter(|&&c| latent > c).count()
}

/// A specification and matching simulated data of `n` rows.
pub fn archetype(kind: Archetype, n: usize, seed: u64) -> (ModelSpec, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let (spec, y) = match kind {
        Archetype::ShiftCount | Archetype::HurdleCount => {
            let hurdle = kind == Archetype::HurdleCount;
            let y: Vec<u64> = x
                .iter()
                .map(|&z| {
                    if hurdle && rng.random::<f64>() < 0.3 - 0.2 * z {
                        return 0;
                    }
                    Poisson::new((1.2 + 0.8 * z).exp()).unwrap().sample(&mut rng) as u64
                })
                .collect();
            let mut terms = vec![count_baseline(), TermSpec::Linear { columns: cols(&["x"]) }];
            if hurdle {
                terms.push(TermSpec::HurdleZero { columns: cols(&["x"]) });
            }
            (
                ModelSpec {
                    response: response(ResponseKind::Count, None),
                    terms,
                },
                Column::Count(y),
            )
        }
        Archetype::ProportionalOrdinal => {
            let y = x.iter().map(|&z| ordinal_draw(&mut rng, 1.5 * z, &[0.0, 1.0])).collect();
            (
                ModelSpec {
                    response: response(ResponseKind::Ordinal, Some(3)),
                    terms: vec![TermSpec::BaselineOrdinal, TermSpec::Linear { columns: cols(&["x"]) }],
                },
                Column::Ordinal(y),
            )
        }
        Archetype::NonProportionalOrdinal => {
            let y = x
                .iter()
                .zip(&w)
                .map(|(&a, &b)| ordinal_draw(&mut rng, (3.0 * a).sin() + a * b, &[-0.2, 0.8]))
                .collect();
            (
                ModelSpec {
                    response: response(ResponseKind::Ordinal, Some(3)),
                    terms: vec![
                        TermSpec::BaselineOrdinal,
                        TermSpec::CategorySpecificSmooth {
                            columns: cols(&["x"]),
                            dimension: 5,
                            hyperparameters: Hyperparameters::default(),
                            jitter: crate::penalty::DEFAULT_JITTER,
                        },
                        TermSpec::TensorSmooth {
                            columns: cols(&["x", "w"]),
                            dimension: TensorDimension::Same(4),
                            hyperparameters: Hyperparameters::default(),
                            grid_size: crate::penalty::DEFAULT_OMEGA_GRID,
                        },
                    ],
                },
                Column::Ordinal(y),
            )
        }
    };
    let data = Dataset::new()
        .with("y", y)
        .and_then(|d| d.with("x", Column::Continuous(x)))
        .and_then(|d| d.with("w", Column::Continuous(w)))
        .expect("columns have equal length");
    (spec, data)
}
