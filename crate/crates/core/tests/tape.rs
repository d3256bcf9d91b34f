use std::sync::Arc;

use pointmbf::backbone::{NetworkConfig, WeightsBundle};
use pointmbf::eval::{generate_synthetic_pair, pair_loss, SynthConfig, TrainConfig};
use pointmbf::network::FramePrep;
use pointmbf::tape::{Tape, Tensor};
use pointmbf::Error;

#[test]
fn sum_of_parameter_has_unit_gradient() {
    let mut tape = Tape::new();
    let p = tape.param("p", || Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 7.0]));
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.params().get("p").unwrap().data, vec![1.0; 6]);
}

#[test]
fn max_routes_to_winner_and_lowest_tie() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(3, 2, vec![2.0, 1.0, 1.0, 1.0, 0.0, 1.0]));
    let m = tape.segment_max(x, Arc::new(vec![0, 3]));
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(2, 2, vec![0.3, -0.2, 1.5, -2.0]));
    let w = tape.param("w", || Tensor::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]));
    let h = tape.linear(x, w, None);
    let h = tape.leaky_relu(h, 0.1);
    let h = tape.exp(h);
    let zero = tape.constant(Tensor::zeros(2, 2));
    let l = tape.mul(h, zero);
    let l = tape.sum(l);
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(x).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(g.params().get("w").unwrap().data.iter().all(|&v| v == 0.0));
}

#[test]
fn shared_parameter_accumulates_once() {
    let mut tape = Tape::new();
    let a = tape.param("a", || Tensor::scalar(3.0));
    let b = tape.param("a", || unreachable!());
    assert_eq!(a, b);
    let p = tape.mul(a, b);
    let g = tape.backward(p).unwrap();
    assert_eq!(g.params().get("a").unwrap().data, vec![6.0]);
}

#[test]
fn backward_usage_errors() {
    let mut other = Tape::new();
    let foreign = other.variable(Tensor::scalar(1.0));
    let tape = Tape::new();
    assert!(matches!(tape.backward(foreign), Err(Error::Usage(_))));

    let mut tape = Tape::new();
    let v = tape.variable(Tensor::zeros(2, 1));
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let v = tape.variable(Tensor::scalar(5.0));
    let p = tape.mul(c, v);
    let g = tape.backward(p).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(v).unwrap().data, vec![2.0]);
}

#[test]
fn pipeline_gradients_replay_bitwise() {
    let synth = SynthConfig { width: 32, height: 32, ..SynthConfig::default() };
    let pair = generate_synthetic_pair(3, 10.0, &synth);
    let cfg = TrainConfig { k: 20, ransac_l: 10, ..TrainConfig::default() };
    let weights = WeightsBundle::init(&NetworkConfig::default(), 1);
    let src = FramePrep::new(&pair.src_color, &pair.src_depth, &pair.intr, &cfg.pipeline).unwrap();
    let tgt = FramePrep::new(&pair.tgt_color, &pair.tgt_depth, &pair.intr, &cfg.pipeline).unwrap();
    let (l1, g1) = pair_loss(&weights, &src, &tgt, &pair, &cfg, 11).unwrap();
    let (l2, g2) = pair_loss(&weights, &src, &tgt, &pair, &cfg, 11).unwrap();
    assert_eq!(l1.total.to_bits(), l2.total.to_bits());
    assert_eq!(g1.len(), g2.len());
    assert!(!g1.is_empty());
    for ((n1, t1), (n2, t2)) in g1.iter().zip(g2.iter()) {
        assert_eq!(n1, n2);
        let b1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2, "{n1}");
    }
}
