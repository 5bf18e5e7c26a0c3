//! Naive `f64` re-implementations used as gradient oracles: the networks are
//! re-evaluated with plain loops in double precision, and central finite
//! differences of those evaluations are compared with the library's analytic
//! `f32` gradients.
#![allow(dead_code)]

use pixelfool::numnet::{Layer, Network};
use pixelfool::ppo::ActorCritic;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error, as a fraction of the largest
/// numeric gradient magnitude in the same check. Coordinates whose true
/// gradient is many orders below the rest are limited by `f32` accumulation
/// noise, not by the derivative being wrong.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
enum Op {
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        off: usize,
    },
    Dense {
        inp: usize,
        out: usize,
        off: usize,
    },
    Relu,
    Flatten,
}

/// Double-precision copy of a [`Network`] with all parameters in one vector
/// (layer order, weight before bias — the library's visiting order).
#[derive(Debug, Clone)]
pub struct RefNet {
    ops: Vec<Op>,
    pub theta: Vec<f64>,
    pub in_len: usize,
    pub out_len: usize,
}

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        let mut ops = Vec::new();
        let mut theta = Vec::new();
        for layer in net.layers() {
            let off = theta.len();
            match layer {
                Layer::Conv2d(c) => ops.push(Op::Conv {
                    in_c: c.in_channels,
                    out_c: c.out_channels,
                    k: c.kernel,
                    stride: c.stride,
                    pad: c.padding,
                    h: c.in_h,
                    w: c.in_w,
                    off,
                }),
                Layer::Dense(d) => ops.push(Op::Dense {
                    inp: d.in_features,
                    out: d.out_features,
                    off,
                }),
                Layer::Relu(_) => ops.push(Op::Relu),
                Layer::Flatten(_) => ops.push(Op::Flatten),
            }
            for p in layer.params() {
                theta.extend(p.data().iter().map(|&v| v as f64));
            }
        }
        Self {
            ops,
            theta,
            in_len: net.input_shape().iter().product(),
            out_len: net.output_shape().iter().product(),
        }
    }

    /// Forward pass over `batch` samples laid out row-major.
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        x.chunks(self.in_len)
            .flat_map(|s| self.forward_one(theta, s))
            .collect()
    }

    fn forward_one(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for op in &self.ops {
            cur = match *op {
                Op::Conv {
                    in_c,
                    out_c,
                    k,
                    stride,
                    pad,
                    h,
                    w,
                    off,
                } => {
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (w + 2 * pad - k) / stride + 1;
                    let bias = off + out_c * in_c * k * k;
                    let mut out = vec![0.0; out_c * oh * ow];
                    for o in 0..out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = theta[bias + o];
                                for c in 0..in_c {
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let iy = (oy * stride + ki) as isize - pad as isize;
                                            let ix = (ox * stride + kj) as isize - pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let wv =
                                                theta[off + ((o * in_c + c) * k + ki) * k + kj];
                                            acc +=
                                                wv * cur[(c * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                out[(o * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    out
                }
                Op::Dense { inp, out, off } => (0..out)
                    .map(|o| {
                        theta[off + out * inp + o]
                            + (0..inp)
                                .map(|i| theta[off + o * inp + i] * cur[i])
                                .sum::<f64>()
                    })
                    .collect(),
                Op::Relu => cur.iter().map(|&v| v.max(0.0)).collect(),
                Op::Flatten => cur,
            };
        }
        cur
    }
}

/// Central differences of `f` at `point`.
pub fn central_differences(point: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Agreement {
    pub within: usize,
    pub total: usize,
    pub worst: f64,
}

impl Agreement {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.within as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: Agreement) -> Agreement {
        Agreement {
            within: self.within + other.within,
            total: self.total + other.total,
            worst: self.worst.max(other.worst),
        }
    }
}

pub fn agreement(analytic: &[f32], numeric: &[f64]) -> Agreement {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut a = Agreement {
        total: analytic.len(),
        ..Agreement::default()
    };
    for (&g, &n) in analytic.iter().zip(numeric) {
        let g = g as f64;
        let rel = (g - n).abs() / g.abs().max(n.abs()).max(floor);
        if rel <= REL_TOL {
            a.within += 1;
        }
        a.worst = a.worst.max(rel);
    }
    a
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn param_grads(net: &Network) -> Vec<f32> {
    net.layers()
        .iter()
        .flat_map(|l| l.grads().into_iter().flat_map(|g| g.data().to_vec()))
        .collect()
}

/// Checks parameter and input gradients of `loss = Σ upstream · net(x)`.
pub fn check_network(net: &mut Network, x: &[f32], upstream: &[f32]) -> Agreement {
    use pixelfool::tensor::Tensor;
    let batch = x.len() / net.input_shape().iter().product::<usize>();
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(net.input_shape());
    let mut out_shape = vec![batch];
    out_shape.extend(net.output_shape());
    let xt = Tensor::new(in_shape, x.to_vec()).unwrap();
    net.forward(&xt).unwrap();
    let dx = net
        .backward(&Tensor::new(out_shape, upstream.to_vec()).unwrap())
        .unwrap();

    let reference = RefNet::from_network(net);
    let (x64, u64_) = (to_f64(x), to_f64(upstream));
    let loss = |theta: &[f64], x: &[f64]| -> f64 {
        reference
            .forward(theta, x)
            .iter()
            .zip(&u64_)
            .map(|(a, b)| a * b)
            .sum()
    };
    let num_params = central_differences(&reference.theta, FD_STEP, |t| loss(t, &x64));
    let num_input = central_differences(&x64, FD_STEP, |xx| loss(&reference.theta, xx));
    agreement(&param_grads(net), &num_params).merge(agreement(dx.data(), &num_input))
}

/// One PPO training sample for the reference loss.
#[derive(Debug, Clone)]
pub struct PpoSample {
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// PPO total loss of an actor-critic given as three reference nets sharing one
/// parameter vector (trunk, then policy head, then value head).
pub struct RefActorCritic {
    pub trunk: RefNet,
    pub policy: RefNet,
    pub value: RefNet,
    pub factors: Vec<usize>,
}

impl RefActorCritic {
    pub fn new(ac: &ActorCritic) -> Self {
        Self {
            trunk: RefNet::from_network(ac.trunk()),
            policy: RefNet::from_network(ac.policy_head()),
            value: RefNet::from_network(ac.value_head()),
            factors: ac.factors().to_vec(),
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        [
            &self.trunk.theta[..],
            &self.policy.theta[..],
            &self.value.theta[..],
        ]
        .concat()
    }

    /// Action logits from factor scores by explicit digit decoding.
    pub fn logits(&self, scores: &[f64]) -> Vec<f64> {
        let actions: usize = self.factors.iter().product();
        (0..actions)
            .map(|i| {
                let (mut rest, mut offset, mut sum) = (i, scores.len(), 0.0);
                for &f in self.factors.iter().rev() {
                    offset -= f;
                    sum += scores[offset + rest % f];
                    rest /= f;
                }
                sum
            })
            .collect()
    }

    pub fn loss(
        &self,
        theta: &[f64],
        obs: &[f64],
        samples: &[PpoSample],
        eps: f64,
        ec: f64,
        vc: f64,
    ) -> f64 {
        let (t, rest) = theta.split_at(self.trunk.theta.len());
        let (p, v) = rest.split_at(self.policy.theta.len());
        let n = samples.len() as f64;
        let mut total = 0.0;
        for (s, x) in samples.iter().zip(obs.chunks(self.trunk.in_len)) {
            let hidden = self.trunk.forward(t, x);
            let logits = self.logits(&self.policy.forward(p, &hidden));
            let value = self.value.forward(v, &hidden)[0];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
            let entropy = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
            let ratio = (logp[s.action] - s.old_log_prob).exp();
            let objective =
                (ratio * s.advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage);
            total += (-objective + vc * (value - s.ret).powi(2) - ec * entropy) / n;
        }
        total
    }
}

/// Analytic gradient of the full PPO loss from the library against central
/// differences of [`RefActorCritic::loss`], on `batch` random samples.
pub fn check_ppo(
    seed: u64,
    obs_len: usize,
    hidden: &[usize],
    factors: &[usize],
    batch: usize,
) -> Agreement {
    use pixelfool::numnet::Parameterized;
    use pixelfool::ppo::{loss_from_outputs, LossTargets, PpoConfig};
    use pixelfool::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ac = ActorCritic::with_factors(obs_len, hidden, factors, seed).unwrap();
    let actions = ac.action_count();
    let obs: Vec<f32> = (0..batch * obs_len)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let obs_t = Tensor::new(vec![batch, obs_len], obs.clone()).unwrap();
    let (logits, _) = ac.infer(&obs_t).unwrap();
    let action: Vec<usize> = (0..batch).map(|_| rng.random_range(0..actions)).collect();
    let cfg = PpoConfig::default();
    // Old log-probabilities perturbed away from the current policy so that
    // some ratios land outside the clip range, but never within finite
    // difference reach of a clip boundary, where the loss has a kink.
    let boundaries = [
        (1.0 + cfg.clip_epsilon as f64).ln(),
        (1.0 - cfg.clip_epsilon as f64).ln(),
    ];
    let old: Vec<f32> = (0..batch)
        .map(|i| {
            let row = &logits.data()[i * actions..(i + 1) * actions];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&z| (z as f64 - m).exp()).sum::<f64>().ln();
            let shift = loop {
                let d: f64 = rng.random_range(-0.4..0.4);
                if boundaries.iter().all(|b| (d - b).abs() > 0.02) {
                    break d;
                }
            };
            (row[action[i]] as f64 - lse - shift) as f32
        })
        .collect();
    let adv: Vec<f32> = (0..batch).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ret: Vec<f32> = (0..batch).map(|_| rng.random_range(-3.0..3.0)).collect();

    let (lg, values) = ac.forward(&obs_t).unwrap();
    let targets = LossTargets {
        actions: &action,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let (_, grads) = loss_from_outputs(&lg, &values, &targets, &cfg, true);
    let (dl, dv) = grads.unwrap();
    ac.backward(&dl, &dv).unwrap();
    let mut analytic = Vec::new();
    ac.for_each_param(&mut |_, g| analytic.extend_from_slice(g));

    let reference = RefActorCritic::new(&ac);
    let samples: Vec<PpoSample> = (0..batch)
        .map(|i| PpoSample {
            action: action[i],
            old_log_prob: old[i] as f64,
            advantage: adv[i] as f64,
            ret: ret[i] as f64,
        })
        .collect();
    let obs64 = to_f64(&obs);
    let (eps, ec, vc) = (
        cfg.clip_epsilon as f64,
        cfg.entropy_coef as f64,
        cfg.value_coef as f64,
    );
    let numeric = central_differences(&reference.theta(), FD_STEP, |t| {
        reference.loss(t, &obs64, &samples, eps, ec, vc)
    });
    agreement(&analytic, &numeric)
}
