//! Dual-attentive denoising layer: channel-wise then spatial-wise attentive
//! filtering of a feature map,
//! `f_s = A_s(A_c(f) ⊗ f) ⊗ (A_c(f) ⊗ f)`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::layers::{ConvSpec, LinearSpec};
use crate::autograd::params::Bound;
use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// One denoising layer bound to a fixed channel count.
///
/// The shared MLP squeezes channels by `reduction_ratio` (floored at one
/// hidden unit) with a rectifier between the two affine maps and no bias on
/// the second, and the spatial filter is a single conv over the stacked
/// channel-pooled descriptors.
#[derive(Debug, Clone)]
pub struct DadlSpec {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    pub spatial_kernel: usize,
    mlp1: LinearSpec,
    mlp2: LinearSpec,
    conv: ConvSpec,
}

impl DadlSpec {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        reduction_ratio: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        if spatial_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "dadl.spatial_kernel must be odd to preserve the spatial size, got {spatial_kernel}"
            )));
        }
        let name = name.into();
        let hidden = (channels / reduction_ratio.max(1)).max(1);
        let mlp1 = LinearSpec::new(format!("{name}.mlp.l1"), channels, hidden, true);
        let mlp2 = LinearSpec::new(format!("{name}.mlp.l2"), hidden, channels, false);
        let conv = ConvSpec {
            name: format!("{name}.spatial"),
            cin: 2,
            cout: 1,
            k: spatial_kernel,
            stride: 1,
            pad: spatial_kernel / 2,
            bias: true,
        };
        Ok(DadlSpec { name, channels, hidden, spatial_kernel, mlp1, mlp2, conv })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp1.init(store, rng);
        self.mlp2.init(store, rng);
        self.conv.init(store, rng);
        // encoder features are post-relu (nonnegative); a nonnegative first
        // layer with a small positive bias keeps the squeezed rectifier
        // active at initialization even when the hidden width floors at 1
        store
            .get_mut(&format!("{}.w", self.mlp1.name))
            .mapv_inplace(f64::abs);
        store.get_mut(&format!("{}.b", self.mlp1.name)).fill(0.01);
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.mlp1.forward(tape, bound, x);
        let h = tape.relu(h);
        self.mlp2.forward(tape, bound, h)
    }

    /// Channel-wise attentive filter:
    /// `A_c = sigmoid(MLP(avgpool(f)) + MLP(maxpool(f)))`, shape (n, C, 1, 1).
    pub fn channel_filter(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "channel filter expects (n, {}, h, w) features, got {shape:?}",
                self.channels
            )));
        }
        let n = shape[0];
        let avg = tape.global_avg_pool(f);
        let max = tape.global_max_pool(f);
        let a = self.mlp(tape, bound, avg);
        let b = self.mlp(tape, bound, max);
        let sum = tape.add(a, b);
        let act = tape.sigmoid(sum);
        Ok(tape.reshape(act, &[n, self.channels, 1, 1]))
    }

    /// Spatial-wise attentive filter:
    /// `A_s = sigmoid(Conv([avgpool_c(f_c); maxpool_c(f_c)]))`, shape (n, 1, h, w).
    pub fn spatial_filter(&self, tape: &mut Tape, bound: &Bound, f_c: Var) -> Result<Var> {
        let shape = tape.shape(f_c).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "spatial filter expects 4-D features, got {shape:?}"
            )));
        }
        let avg = tape.channel_mean(f_c);
        let max = tape.channel_max(f_c);
        let desc = tape.concat_channels(avg, max);
        let conv = self.conv.forward(tape, bound, desc);
        Ok(tape.sigmoid(conv))
    }

    /// Full layer: `f_c = A_c ⊗ f`, then `f_s = A_s(f_c) ⊗ f_c`.
    pub fn denoise(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let a_c = self.channel_filter(tape, bound, f)?;
        let f_c = tape.mul(a_c, f);
        let a_s = self.spatial_filter(tape, bound, f_c)?;
        Ok(tape.mul(a_s, f_c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd::{finite_diff_grad, max_rel_error};
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn make(channels: usize, kernel: usize) -> (DadlSpec, ParamStore) {
        let spec = DadlSpec::new("dadl", channels, 16, kernel).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        spec.init(&mut store, &mut rng);
        (spec, store)
    }

    fn zero_params(store: &mut ParamStore) {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).fill(0.0);
        }
    }

    fn rand_features(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> ArrayD<f64> {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(&[shape.0, shape.1, shape.2, shape.3]), data).unwrap()
    }

    #[test]
    fn zero_mlp_gives_half_channel_filter() {
        let (spec, mut store) = make(4, 7);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = tape.leaf(rand_features(&mut rng, (2, 4, 3, 3)));
        let a = spec.channel_filter(&mut tape, &bound, f).unwrap();
        for &v in tape.value(a).iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn zero_conv_gives_half_spatial_filter() {
        let (spec, mut store) = make(4, 7);
        zero_params(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = tape.leaf(rand_features(&mut rng, (2, 4, 5, 5)));
        let a = spec.spatial_filter(&mut tape, &bound, f).unwrap();
        assert_eq!(tape.shape(a), &[2, 1, 5, 5]);
        for &v in tape.value(a).iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn spatially_constant_features_give_sigmoid_of_twice_mlp() {
        // avg-pool equals max-pool, so A_c = sigmoid(2 * MLP(c)).
        let (spec, store) = make(4, 7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let per_channel = [0.3, -0.2, 0.9, 0.05];
        let f = Array4::from_shape_fn((1, 4, 3, 3), |(_, c, _, _)| per_channel[c]);
        let fv = tape.leaf(f.into_dyn());
        let a = spec.channel_filter(&mut tape, &bound, fv).unwrap();

        // oracle: run the MLP by hand on the pooled vector
        let w1 = store.get("dadl.mlp.l1.w");
        let b1 = store.get("dadl.mlp.l1.b");
        let w2 = store.get("dadl.mlp.l2.w");
        let hidden = spec.hidden;
        let mut mlp_out = vec![0.0; 4];
        for h in 0..hidden {
            let mut z = b1[[0, h]];
            for c in 0..4 {
                z += per_channel[c] * w1[[c, h]];
            }
            let z = z.max(0.0);
            for c in 0..4 {
                mlp_out[c] += z * w2[[h, c]];
            }
        }
        for c in 0..4 {
            let expect = 1.0 / (1.0 + (-2.0 * mlp_out[c]).exp());
            let got = tape.value(a)[IxDyn(&[0, c, 0, 0])];
            assert!((got - expect).abs() < 1e-12, "channel {c}: {got} vs {expect}");
        }
    }

    #[test]
    fn one_channel_identity_mlp_matches_formula_oracle() {
        // C = 1 with identity MLP on nonnegative inputs: A_c = sigmoid(avg + max).
        let (spec, mut store) = make(1, 1);
        store.get_mut("dadl.mlp.l1.w").fill(1.0);
        store.get_mut("dadl.mlp.l1.b").fill(0.0);
        store.get_mut("dadl.mlp.l2.w").fill(1.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: ArrayD<f64> = rand_features(&mut rng, (3, 1, 4, 4)).mapv(f64::abs);
        let fv = tape.leaf(f.clone());
        let a = spec.channel_filter(&mut tape, &bound, fv).unwrap();
        for i in 0..3 {
            let plane = f.slice(ndarray::s![i, 0, .., ..]);
            let avg = plane.sum() / 16.0;
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = 1.0 / (1.0 + (-(avg + max)).exp());
            let got = tape.value(a)[IxDyn(&[i, 0, 0, 0])];
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_unit_conv_gives_sigmoid_of_twice_features() {
        // one channel: channel avg == channel max, 1x1 conv with weights
        // (1, 1) and zero bias reduces to sigmoid(2 * f_c).
        let (spec, mut store) = make(1, 1);
        store.get_mut("dadl.spatial.w").fill(1.0);
        store.get_mut("dadl.spatial.b").fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_features(&mut rng, (2, 1, 3, 3));
        let fv = tape.leaf(f.clone());
        let a = spec.spatial_filter(&mut tape, &bound, fv).unwrap();
        for (got, &x) in tape.value(a).iter().zip(f.iter()) {
            let expect = 1.0 / (1.0 + (-2.0 * x).exp());
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_filter_matches_naive_convolution_oracle() {
        let (spec, store) = make(3, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_features(&mut rng, (2, 3, 5, 5));
        let fv = tape.leaf(f.clone());
        let a = spec.spatial_filter(&mut tape, &bound, fv).unwrap();

        let w = store.get("dadl.spatial.w");
        let b = store.get("dadl.spatial.b")[IxDyn(&[0, 0, 0, 0])];
        for img in 0..2 {
            // build the 2-channel descriptor by hand
            let mut desc = vec![[[0.0f64; 5]; 5]; 2];
            for i in 0..5 {
                for j in 0..5 {
                    let vals: Vec<f64> =
                        (0..3).map(|c| f[IxDyn(&[img, c, i, j])]).collect();
                    desc[0][i][j] = vals.iter().sum::<f64>() / 3.0;
                    desc[1][i][j] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                }
            }
            // naive sliding window, zero padding 1
            for i in 0..5i64 {
                for j in 0..5i64 {
                    let mut acc = b;
                    for ch in 0..2usize {
                        for a_k in 0..3i64 {
                            for b_k in 0..3i64 {
                                let ri = i + a_k - 1;
                                let rj = j + b_k - 1;
                                if ri < 0 || ri >= 5 || rj < 0 || rj >= 5 {
                                    continue;
                                }
                                acc += w[IxDyn(&[0, ch, a_k as usize, b_k as usize])]
                                    * desc[ch][ri as usize][rj as usize];
                            }
                        }
                    }
                    let expect = 1.0 / (1.0 + (-acc).exp());
                    let got = tape.value(a)[IxDyn(&[img, 0, i as usize, j as usize])];
                    assert!((got - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn denoise_composes_the_two_filters() {
        let (spec, store) = make(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = rand_features(&mut rng, (1, 2, 2, 2));

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fv = tape.leaf(f.clone());
        let out = spec.denoise(&mut tape, &bound, fv).unwrap();

        // composition oracle from the two sub-ops
        let mut tape2 = Tape::new();
        let bound2 = store.bind(&mut tape2);
        let fv2 = tape2.leaf(f.clone());
        let a_c = spec.channel_filter(&mut tape2, &bound2, fv2).unwrap();
        let f_c = tape2.mul(a_c, fv2);
        let a_s = spec.spatial_filter(&mut tape2, &bound2, f_c).unwrap();
        let f_s = tape2.mul(a_s, f_c);

        assert_eq!(tape.value(out), tape2.value(f_s));
    }

    #[test]
    fn denoise_preserves_shape_and_attenuates() {
        let (spec, store) = make(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = rand_features(&mut rng, (2, 4, 6, 6));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fv = tape.leaf(f.clone());
        let out = spec.denoise(&mut tape, &bound, fv).unwrap();
        assert_eq!(tape.shape(out), f.shape());
        for (&y, &x) in tape.value(out).iter().zip(f.iter()) {
            if x != 0.0 {
                assert!(y.abs() < x.abs(), "|f_s| must shrink: {y} vs {x}");
            } else {
                assert_eq!(y, 0.0);
            }
        }
    }

    #[test]
    fn zero_features_map_to_zero() {
        let (spec, store) = make(4, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
        let out = spec.denoise(&mut tape, &bound, f).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_filters_approach_identity() {
        // large positive parameters push both sigmoids toward 1
        let (spec, mut store) = make(2, 1);
        store.get_mut("dadl.mlp.l1.w").fill(0.0);
        store.get_mut("dadl.mlp.l1.b").fill(30.0);
        store.get_mut("dadl.mlp.l2.w").fill(30.0);
        store.get_mut("dadl.spatial.w").fill(0.0);
        store.get_mut("dadl.spatial.b").fill(30.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_features(&mut rng, (1, 2, 3, 3));
        let fv = tape.leaf(f.clone());
        let out = spec.denoise(&mut tape, &bound, fv).unwrap();
        for (&y, &x) in tape.value(out).iter().zip(f.iter()) {
            assert!((y - x).abs() < 1e-8, "expected near-identity: {y} vs {x}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (spec, store) = make(4, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(ArrayD::zeros(IxDyn(&[1, 5, 3, 3])));
        let err = spec.channel_filter(&mut tape, &bound, f).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn monotone_channel_response_under_nonnegative_mlp() {
        let (spec, mut store) = make(4, 3);
        for name in ["dadl.mlp.l1.w", "dadl.mlp.l2.w"] {
            let w = store.get_mut(name);
            w.mapv_inplace(f64::abs);
        }
        let base = Array4::from_shape_fn((1, 4, 3, 3), |(_, c, _, _)| 0.2 + 0.1 * c as f64);
        let mut bumped = base.clone();
        for i in 0..3 {
            for j in 0..3 {
                bumped[[0, 1, i, j]] += 0.4;
            }
        }
        let eval = |f: Array4<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let fv = tape.leaf(f.into_dyn());
            let a = spec.channel_filter(&mut tape, &bound, fv).unwrap();
            tape.value(a)[IxDyn(&[0, 1, 0, 0])]
        };
        assert!(eval(bumped) >= eval(base));
    }

    #[test]
    fn denoise_gradients_match_finite_differences() {
        let (spec, store) = make(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = rand_features(&mut rng, (1, 2, 2, 2));

        let loss = |probe: &ArrayD<f64>, store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let fv = tape.leaf(probe.clone());
            let out = spec.denoise(&mut tape, &bound, fv).unwrap();
            let s = tape.sigmoid(out);
            let root = tape.sum_all(s);
            tape.scalar(root)
        };

        // input gradient
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let fv = tape.leaf(f.clone());
        let out = spec.denoise(&mut tape, &bound, fv).unwrap();
        let sig = tape.sigmoid(out);
        let root = tape.sum_all(sig);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get(fv).unwrap();
        let numeric = finite_diff_grad(|p| loss(p, &store), &f, 1e-5);
        assert!(max_rel_error(analytic, &numeric) < 1e-4);

        // parameter gradients
        for name in ["dadl.mlp.l1.w", "dadl.mlp.l2.w", "dadl.spatial.w", "dadl.spatial.b"] {
            let analytic = grads.get_or_zeros(bound.var(name), store.get(name).shape());
            let base = store.get(name).clone();
            let numeric = finite_diff_grad(
                |p| {
                    let mut probe_store = store.clone();
                    probe_store.get_mut(name).assign(p);
                    loss(&f, &probe_store)
                },
                &base,
                1e-5,
            );
            assert!(
                max_rel_error(&analytic, &numeric) < 1e-4,
                "parameter {name} gradient mismatch"
            );
        }
    }
}
