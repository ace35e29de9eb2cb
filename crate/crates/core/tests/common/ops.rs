use rand::Rng;
use ssan_core::attention::{cross_attention, form_qkv_ssan, multi_head_attention, AttnMask};
use ssan_core::fsmn::fsmn_apply;
use ssan_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use ssan_core::tensor::{Dropout, Graph, NodeId, Tensor};
use ssan_core::training::label_smoothed_ce;
use ssan_core::Result;

use super::{rand_tensor, rng, weighted_sum};

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId], u64) -> Result<NodeId>>;

/// One differentiable operation with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case<B>(name: &'static str, shapes: &[&[usize]], build: B) -> OpCase
where
    B: Fn(&mut Graph<f64>, &[NodeId], u64) -> Result<NodeId> + 'static,
{
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

impl OpCase {
    /// Largest relative error over `draws` random inputs.
    pub fn max_error(&self, draws: u64) -> f64 {
        let mut worst = 0.0f64;
        for draw in 0..draws {
            let mut r = rng(draw * 31 + self.name.len() as u64);
            let inputs: Vec<Tensor<f64>> = self.shapes.iter().map(|s| rand_tensor(s, &mut r).with_grad()).collect();
            let report = check_gradients(
                &inputs,
                |g: &mut Graph<f64>, ids: &[NodeId]| (self.build)(g, ids, draw),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.checked > 0, "{}", self.name);
            worst = worst.max(report.max_rel_error);
        }
        worst
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let key_mask = AttnMask::key_padding(&[4, 2], 4, 4);
    let causal = AttnMask::causal(&[3], 3);
    let cross = AttnMask::key_padding(&[5, 3], 2, 5);
    let fsmn_mask = [true, true, true, true, false, false, true, true, true, true, true, true];
    vec![
        case("matmul", &[&[2, 3, 4], &[4, 5]], |g, x, d| {
            let y = g.matmul(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("matmul_bt", &[&[3, 4], &[5, 4]], |g, x, d| {
            let y = g.matmul_bt(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("batched matmul", &[&[2, 3, 4], &[2, 4, 2]], |g, x, d| {
            let y = g.matmul(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("batched matmul_bt", &[&[2, 3, 4], &[2, 5, 4]], |g, x, d| {
            let y = g.matmul_bt(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("add", &[&[3, 4], &[3, 4]], |g, x, d| {
            let y = g.add(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("mul", &[&[3, 4], &[3, 4]], |g, x, d| {
            let y = g.mul(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("scale", &[&[5]], |g, x, d| {
            let y = g.scale(x[0], -1.7);
            weighted_sum(g, y, d)
        }),
        case("add_row", &[&[2, 3, 4], &[4]], |g, x, d| {
            let y = g.add_row(x[0], x[1])?;
            weighted_sum(g, y, d)
        }),
        case("sum", &[&[2, 3]], |g, x, _| {
            let y = g.mul(x[0], x[0])?;
            Ok(g.sum(y))
        }),
        case("relu", &[&[4, 6]], |g, x, d| {
            // Inputs are pushed at least 0.1 away from the kink.
            let v = g.value(x[0]).data().to_vec();
            let shift = Tensor::new(&[4, 6], v.iter().map(|&a| if a >= 0.0 { 0.1 } else { -0.1 }).collect())?;
            let s = g.constant(shift);
            let z = g.add(x[0], s)?;
            let y = g.relu(z);
            weighted_sum(g, y, d)
        }),
        case("softmax", &[&[3, 5]], |g, x, d| {
            let y = g.softmax(x[0]);
            weighted_sum(g, y, d)
        }),
        case("log_softmax", &[&[2, 2, 5]], |g, x, d| {
            let y = g.log_softmax(x[0]);
            weighted_sum(g, y, d)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x, d| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-6)?;
            weighted_sum(g, y, d)
        }),
        case("reshape", &[&[2, 6]], |g, x, d| {
            let y = g.reshape(x[0], &[3, 4])?;
            weighted_sum(g, y, d)
        }),
        case("split/merge heads", &[&[2, 3, 8]], |g, x, d| {
            let h = g.split_heads(x[0], 4)?;
            let w = g.constant(Tensor::from_fn(&[8, 3, 2], |i| (i as f64 * 0.3).cos()));
            let p = g.mul(h, w)?;
            let m = g.merge_heads(p, 4)?;
            weighted_sum(g, m, d)
        }),
        case("embedding", &[&[6, 3]], |g, x, d| {
            let y = g.embedding(x[0], &[1, 5, 1, 0], &[2, 2])?;
            weighted_sum(g, y, d)
        }),
        case("dropout", &[&[4, 5]], |g, x, d| {
            let mut r = rng(d);
            let y = g.dropout(x[0], 0.3, &mut r)?;
            weighted_sum(g, y, d)
        }),
        case("fsmn", &[&[2, 6, 4], &[3, 4], &[2, 4]], |g, x, d| {
            let y = fsmn_apply(g, x[0], x[1], Some(x[2]), None)?;
            weighted_sum(g, y, d)
        }),
        case("fsmn masked", &[&[2, 6, 4], &[2, 4], &[1, 4]], move |g, x, d| {
            let y = fsmn_apply(g, x[0], x[1], Some(x[2]), Some(&fsmn_mask))?;
            weighted_sum(g, y, d)
        }),
        case("fsmn look-back only", &[&[5, 3], &[4, 3]], |g, x, d| {
            let y = fsmn_apply(g, x[0], x[1], None, None)?;
            weighted_sum(g, y, d)
        }),
        case("ssan attention", &[&[2, 4, 6], &[3, 6], &[2, 6], &[3, 6], &[2, 6], &[6, 6]], move |g, x, d| {
            let positions = [true, true, true, true, true, true, false, false];
            let (q, k, v) = form_qkv_ssan(g, x[0], x[1], Some(x[2]), x[3], Some(x[4]), Some(&positions))?;
            let (out, _) = multi_head_attention(g, q, k, v, x[5], 2, &key_mask, &mut Dropout::inactive())?;
            weighted_sum(g, out, d)
        }),
        case("causal attention", &[&[1, 3, 4], &[4, 4]], move |g, x, d| {
            let (out, _) = multi_head_attention(g, x[0], x[0], x[0], x[1], 2, &causal, &mut Dropout::inactive())?;
            weighted_sum(g, out, d)
        }),
        case(
            "cross attention",
            &[&[2, 2, 4], &[2, 5, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4]],
            move |g, x, d| {
                let w = [x[2], x[3], x[4], x[5]];
                let (out, _) = cross_attention(g, x[0], x[1], w, 2, &cross, &mut Dropout::inactive())?;
                weighted_sum(g, out, d)
            },
        ),
        case("label-smoothed cross-entropy", &[&[2, 3, 7]], |g, x, d| {
            let mut r = rng(d);
            let mut targets: Vec<u32> = (0..6).map(|_| r.random_range(1..7)).collect();
            targets[4] = 0;
            label_smoothed_ce(g, x[0], &targets, 0.1, 0)
        }),
    ]
}
