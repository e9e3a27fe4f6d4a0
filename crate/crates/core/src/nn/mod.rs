//! Small differentiable-computation core: tensors, a reverse-mode tape,
//! dense/convolutional networks, Adam and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod network;
mod params;
mod tensor;

pub use checkpoint::{sha256_hex, Checkpoint, CHECKPOINT_VERSION};
pub use graph::{log_sigmoid, sigmoid, Backward, Graph, MaskBank, Var};
pub use network::{forward, Activation, LayerSpec, Network, NetworkSpec};
pub use params::{adam_step, AdamConfig, Gradients, ParamId, Parameter, ParameterSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{check_input_grad, check_param_grads};
    use super::*;
    use crate::geometry::Frame;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(3, &[], 3, Activation::Identity, Activation::Identity);
        let net = Network::build(&mut params, "id", "g", &spec, &mut rng()).unwrap();
        let w = params.find("id.0.w").unwrap();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        params.value_mut(w).data = eye;
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let (y, g) = forward(&net, &params, &x).unwrap();
        assert_eq!(g.value(y).data, x.data);
    }

    #[test]
    fn zero_weight_network_outputs_bias() {
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(4, &[], 2, Activation::Identity, Activation::Identity);
        let net = Network::build(&mut params, "z", "g", &spec, &mut rng()).unwrap();
        let w = params.find("z.0.w").unwrap();
        let b = params.find("z.0.b").unwrap();
        params.value_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        params.value_mut(b).data = vec![0.5, -1.5];
        let x = random_tensor(&mut rng(), vec![3, 4]);
        let (y, g) = forward(&net, &params, &x).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        let mut r = rng();
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(5, &[7], 3, Activation::Tanh, Activation::Identity);
        let net = Network::build(&mut params, "m", "g", &spec, &mut r).unwrap();
        for (_, p) in params.clone().iter() {
            let id = params.find(&p.name).unwrap();
            let n = p.value.numel();
            params.value_mut(id).data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        }
        let x = random_tensor(&mut r, vec![2, 5]);
        let (y, g) = forward(&net, &params, &x).unwrap();

        let w0 = &params.value(params.find("m.0.w").unwrap()).data;
        let b0 = &params.value(params.find("m.0.b").unwrap()).data;
        let w1 = &params.value(params.find("m.1.w").unwrap()).data;
        let b1 = &params.value(params.find("m.1.b").unwrap()).data;
        for row in 0..2 {
            let xr = x.row(row);
            let mut h = [0.0; 7];
            for j in 0..7 {
                let mut s = b0[j];
                for i in 0..5 {
                    s += xr[i] * w0[i * 7 + j];
                }
                h[j] = s.tanh();
            }
            for j in 0..3 {
                let mut s = b1[j];
                for i in 0..7 {
                    s += h[i] * w1[i * 3 + j];
                }
                assert!((g.value(y).data[row * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(4, &[8], 2, Activation::Tanh, Activation::Identity);
        let net = Network::build(&mut params, "s", "g", &spec, &mut rng()).unwrap();
        assert!(forward(&net, &params, &Tensor::zeros(vec![2, 3])).is_err());
        let bad = NetworkSpec {
            input: vec![4],
            layers: vec![LayerSpec::Flatten],
        };
        assert!(bad.shapes().is_err());
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(3, &[], 2, Activation::Identity, Activation::Identity);
        let net = Network::build(&mut params, "l", "g", &spec, &mut rng()).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let (y, g) = forward(&net, &params, &x).unwrap();
        let up = vec![0.3, -0.7];
        let back = g.backward_with(y, up.clone()).unwrap();
        let gw = back.grads.get(params.find("l.0.w").unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((gw[i * 2 + j] - x.data[i] * up[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_branch_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let unused = g.square(c);
        let s = g.sum(a);
        let back = g.backward(s).unwrap();
        assert_eq!(back.wrt(&g, c), vec![0.0, 0.0]);
        assert_eq!(back.wrt(&g, unused), vec![0.0, 0.0]);
        assert_eq!(back.wrt(&g, a), vec![1.0, 1.0]);
    }

    #[test]
    fn three_layer_net_gradients_match_finite_differences() {
        let mut r = rng();
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(4, &[6, 5], 3, Activation::LeakyRelu(0.2), Activation::Tanh);
        let net = Network::build(&mut params, "n", "g", &spec, &mut r).unwrap();
        let x = random_tensor(&mut r, vec![3, 4]);
        let loss = |g: &mut Graph, p: &ParameterSet| {
            let xi = g.input(x.clone());
            let y = net.apply(g, p, xi)?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        };
        let err = check_param_grads(&params, &["g"], 1e-5, loss).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn conv_encoder_gradients_match_finite_differences() {
        let mut r = rng();
        let mut params = ParameterSet::new();
        let spec = NetworkSpec {
            input: vec![1, 9, 9],
            layers: vec![
                LayerSpec::Conv {
                    channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    activation: Activation::LeakyRelu(0.2),
                },
                LayerSpec::Conv {
                    channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    activation: Activation::Tanh,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Sigmoid,
                },
            ],
        };
        let net = Network::build(&mut params, "c", "g", &spec, &mut r).unwrap();
        let x = random_tensor(&mut r, vec![1, 9, 9]);
        let loss = |g: &mut Graph, p: &ParameterSet| {
            let xi = g.input(x.clone());
            let y = net.apply(g, p, xi)?;
            Ok(g.sum(y))
        };
        let err = check_param_grads(&params, &["g"], 1e-5, loss).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
        let err = check_input_grad(&x, 1e-5, |g, xi| {
            let y = net.apply(g, &params, xi)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "input grad error {err}");
    }

    #[test]
    fn structural_ops_gradients_match_finite_differences() {
        let mut r = rng();
        let x = random_tensor(&mut r, vec![3, 6]);
        let angles = [0.3, -1.2, 2.5];
        let err = check_input_grad(&x, 1e-5, |g, xi| {
            let a = g.slice_cols(xi, 1, 3)?;
            let b = g.slice_cols(xi, 0, 2)?;
            let cat = g.concat_cols(&[a, b])?;
            let rows = g.gather_rows(cat, &[2, 0, 0])?;
            let both = g.concat_rows(&[rows, cat])?;
            let e = g.exp(both);
            let s = g.scale(e, 0.7);
            let ls = g.log_sigmoid(s);
            let rot = g.center_rotate(xi, &angles)?;
            let sig = g.sigmoid(rot);
            let prod = g.mul(sig, rot)?;
            let diff = g.sub(prod, xi)?;
            let t1 = g.mean(ls);
            let t2 = g.sum(diff);
            let sq = g.square(diff);
            let t3 = g.mean(sq);
            let t = g.add(t1, t2)?;
            Ok(g.add(t, t3)?)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn mask_penalty_gradient_matches_finite_differences() {
        let frame = Frame::new(16, 16);
        let mut r = rng();
        let masks = vec![
            (0..256).map(|i| if (i / 16) % 5 < 2 { 0.0 } else { 1.0 }).collect(),
            (0..256).map(|_| r.random_range(0.0..1.0)).collect(),
        ];
        let bank = Arc::new(MaskBank { frame, masks });
        let kp = random_tensor(&mut r, vec![2, 6]);
        let err = check_input_grad(&kp, 1e-5, |g, xi| {
            let p = g.mask_penalty(xi, bank.clone(), &[1, 0], 0.2)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300 + 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(-1e308).is_finite());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut params = ParameterSet::new();
        let id = params.add("p", "g", Tensor::new(vec![2], vec![0.4, -0.3]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&params, id).unwrap();
        let z = g.scale(v, 0.0);
        let s = g.sum(z);
        let back = g.backward(s).unwrap();
        adam_step(&mut params, &back.grads, &AdamConfig::default(), &["g"]).unwrap();
        assert_eq!(params.value(id).data, vec![0.4, -0.3]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut params = ParameterSet::new();
        let id = params.add("p", "g", Tensor::scalar(1.0));
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut g = Graph::new();
        let v = g.param(&params, id).unwrap();
        let s = g.scale(v, 0.5);
        let back = g.backward(s).unwrap();
        adam_step(&mut params, &back.grads, &cfg, &["g"]).unwrap();
        // m = 0.1*0.5, v = 0.001*0.25; mhat = 0.5, vhat = 0.25.
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((params.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic_and_respects_groups() {
        let build = || {
            let mut params = ParameterSet::new();
            let a = params.add("a", "gen", Tensor::scalar(0.2));
            let b = params.add("b", "disc", Tensor::scalar(-0.7));
            (params, a, b)
        };
        let run = || {
            let (mut params, a, b) = build();
            for _ in 0..3 {
                let mut g = Graph::new();
                let va = g.param(&params, a).unwrap();
                let vb = g.param(&params, b).unwrap();
                let prod = g.mul(va, vb).unwrap();
                let sq = g.square(prod);
                let back = g.backward(sq).unwrap();
                adam_step(&mut params, &back.grads, &AdamConfig::default(), &["gen"]).unwrap();
            }
            (params.value(a).item(), params.value(b).item())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.to_bits(), a2.to_bits());
        assert_eq!(b1, -0.7);
        assert_eq!(b1.to_bits(), b2.to_bits());
    }

    #[test]
    fn adam_rejects_stale_and_non_finite_gradients() {
        let mut params = ParameterSet::new();
        let id = params.add("weights", "g", Tensor::scalar(1.0));
        let mut g = Graph::new();
        let v = g.param(&params, id).unwrap();
        let s = g.square(v);
        let back = g.backward(s).unwrap();
        adam_step(&mut params, &back.grads, &AdamConfig::default(), &["g"]).unwrap();
        let err = adam_step(&mut params, &back.grads, &AdamConfig::default(), &["g"]).unwrap_err();
        assert!(matches!(err, crate::Error::StaleTape(_)));

        let mut g = Graph::new();
        let v = g.param(&params, id).unwrap();
        let s = g.scale(v, f64::INFINITY);
        let back = g.backward(s).unwrap();
        let err = adam_step(&mut params, &back.grads, &AdamConfig::default(), &["g"]).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut params = ParameterSet::new();
        let spec = NetworkSpec::mlp(3, &[4], 2, Activation::Tanh, Activation::Identity);
        Network::build(&mut params, "n", "g", &spec, &mut rng()).unwrap();
        let ck = Checkpoint::new(spec.clone(), 7, params).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back: Checkpoint<NetworkSpec> = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut raw: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        raw.as_object_mut().unwrap().remove("version");
        assert!(Checkpoint::<NetworkSpec>::from_bytes(&serde_json::to_vec(&raw).unwrap()).is_err());
    }
}
