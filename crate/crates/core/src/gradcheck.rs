//! The finite-difference verification suite: every differentiable op, the
//! attention blocks, and an end-to-end toy network, each checked against
//! central differences on seeded random inputs.

use crate::attention::{ecmsa_forward, EcmsaConfig, EcmsaParams, EseParams};
use crate::error::Result;
use crate::nets::{build, parse_attachment, Arch, NetConfig};
use crate::rng::Rng;
use crate::tensor::{finite_diff_check, Tensor};
use crate::text::{EmbeddingSource, TextEmbedding};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Random tensor bounded away from zero, for ops with a kink at 0.
fn nonzero_uniform(shape: &[usize], rng: &mut Rng) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    (0..numel)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform(0.1, 1.0)
        })
        .collect()
}

fn binary(shape: &[usize], rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| f64::from(rng.next_f64() > 0.5)).collect();
    Tensor::from_vec(shape, data).expect("binary tensor")
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, tolerance: f64, params: &[&Tensor], mut f: F)
    where
        F: FnMut() -> Result<Tensor>,
    {
        let mut worst = 0.0f64;
        let mut failure = None;
        for p in params {
            match finite_diff_check(&mut f, p, 1e-5) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let max_rel_err = if failure.is_some() { f64::INFINITY } else { worst };
        self.results.push(CheckResult {
            name: name.to_owned(),
            max_rel_err,
            tolerance,
        });
    }
}

/// Run every check; deterministic for a given seed.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut suite = Suite { results: Vec::new() };
    let s = &mut suite;

    for trial in 0..3u64 {
        let tag = |name: &str| format!("{}[{}]", name, trial);
        let mut rng = Rng::new(seed ^ (trial.wrapping_mul(0x9E37_79B9)));

        {
            let a = Tensor::param_uniform(&[5, 7], -1.0, 1.0, &mut rng);
            let b = Tensor::param_uniform(&[7, 3], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
            s.check(&tag("matmul"), 1e-6, &[&a, &b], || {
                a.matmul(&b)?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[4, 6], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
            s.check(&tag("transpose"), 1e-6, &[&x], || {
                x.transpose()?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::param_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
            let b = Tensor::param_uniform(&[3], -0.2, 0.2, &mut rng);
            let head = Tensor::uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
            s.check(&tag("conv2d_3x3"), 1e-6, &[&x, &w, &b], || {
                x.conv2d(&w, &b, 1)?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let w = Tensor::param_uniform(&[2, 3, 1, 1], -0.5, 0.5, &mut rng);
            let b = Tensor::param_uniform(&[2], -0.2, 0.2, &mut rng);
            let head = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
            s.check(&tag("conv2d_1x1"), 1e-6, &[&x, &w, &b], || {
                x.conv2d(&w, &b, 0)?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[4, 5], -2.0, 2.0, &mut rng);
            let head = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
            s.check(&tag("softmax_rows"), 1e-6, &[&x], || {
                x.softmax_rows()?.mul(&head)?.sum()
            });
        }
        {
            let a = Tensor::param_uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::param_uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
            s.check(&tag("add_sub_mul"), 1e-6, &[&a, &b], || {
                a.add(&b)?.mul(&a.sub(&b)?)?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param(&[3, 4], nonzero_uniform(&[3, 4], &mut rng)).unwrap();
            let head = Tensor::uniform(&[3, 4], 0.1, 1.0, &mut rng);
            s.check(&tag("relu"), 1e-5, &[&x], || x.relu()?.mul(&head)?.sum());
        }
        {
            let x = Tensor::param_uniform(&[3, 4], -3.0, 3.0, &mut rng);
            let head = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
            s.check(&tag("sigmoid"), 1e-6, &[&x], || {
                x.sigmoid()?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
            let g = Tensor::param_uniform(&[3], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
            s.check(&tag("mul_channel"), 1e-6, &[&x, &g], || {
                x.mul_channel(&g)?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
            s.check(&tag("avg_pool_global"), 1e-6, &[&x], || {
                x.avg_pool_global()?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
            s.check(&tag("max_pool_2x2"), 1e-5, &[&x], || {
                x.max_pool_2x2()?.mul(&head)?.sum()
            });
        }
        {
            let x = Tensor::param_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
            s.check(&tag("upsample_nearest_2x"), 1e-6, &[&x], || {
                x.upsample_nearest_2x()?.mul(&head)?.sum()
            });
        }
        {
            let a = Tensor::param_uniform(&[1, 2, 2], -1.0, 1.0, &mut rng);
            let b = Tensor::param_uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
            let head = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
            s.check(&tag("concat_channels"), 1e-6, &[&a, &b], || {
                Tensor::concat_channels(&[a.clone(), b.clone()])?
                    .mul(&head)?
                    .sum()
            });
        }
        {
            let pred = Tensor::param_uniform(&[4, 4], 0.05, 0.95, &mut rng);
            let gt = binary(&[4, 4], &mut rng);
            s.check(&tag("bce_loss"), 1e-6, &[&pred], || pred.bce_loss(&gt));
        }
        {
            let x = Tensor::param_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let p = EseParams::init(3, &mut rng);
            let gt = binary(&[3, 4, 4], &mut rng);
            s.check(&tag("ese_block"), 1e-5, &[&x, &p.w, &p.b], || {
                ecmsa_ese_head(&x, &p, &gt)
            });
        }
    }

    // Full attention block, every parameter tensor.
    {
        let mut rng = Rng::new(seed ^ 0xA5A5);
        let v_in = Tensor::param_uniform(&[8, 4, 4], -1.0, 1.0, &mut rng);
        let p = EcmsaParams::init(8, 16, &mut rng);
        let f2 = TextEmbedding {
            dim: 16,
            values: (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            source: EmbeddingSource::ExternalFile,
        };
        let gt = binary(&[8, 4, 4], &mut rng);
        let cfg = EcmsaConfig::default();
        let params = p.params();
        let mut refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        refs.push(&v_in);
        s.check("ecmsa_block", 1e-4, &refs, || {
            let (out, _) = ecmsa_forward(&v_in, &f2, &p, &cfg)?;
            out.sigmoid()?.bce_loss(&gt)
        });
    }

    // End-to-end toy network: depth 2, base 4, attention at the bottleneck.
    {
        let mut rng = Rng::new(seed ^ 0xC3C3);
        let cfg = NetConfig {
            arch: Arch::Unet,
            depth: 2,
            base_channels: 4,
            input_size: 16,
            d_text: 8,
        };
        let net = build(
            &cfg,
            &parse_attachment("in:1").expect("valid attachment"),
            &EcmsaConfig::default(),
            seed,
        )
        .expect("valid toy config");
        let image = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let f2 = TextEmbedding {
            dim: 8,
            values: (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            source: EmbeddingSource::ExternalFile,
        };
        let gt = binary(&[1, 16, 16], &mut rng);
        let params = net.params();
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        s.check("end_to_end_unet_in1", 1e-4, &refs, || {
            net.forward(&image, Some(&f2))?.mask.bce_loss(&gt)
        });
    }

    suite.results
}

fn ecmsa_ese_head(x: &Tensor, p: &EseParams, gt: &Tensor) -> Result<Tensor> {
    crate::attention::ese_forward(x, p)?.sigmoid()?.bce_loss(gt)
}
