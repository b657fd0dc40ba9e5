//! Spatial and temporal encoding: symmetric adjacency normalization, a
//! GCN stack with skip readout, and a GRU cell for aggregation over the
//! window. All of it runs on the [`crate::tape`], so gradients come for
//! free from the verified op set.

use crate::tape::{Mat, Tape, VarId};

/// Tape handles of the GCN stack: one weight per layer plus the readout
/// matrix, whose input width must be (layers + 1) * hidden.
pub struct GcnParams {
    pub layers: Vec<VarId>,
    pub w_r: VarId,
}

/// Tape handles of the GRU cell: reset / update / candidate gates, each
/// with an input map, a hidden map, and two biases.
pub struct GruParams {
    pub w_ir: VarId,
    pub w_iz: VarId,
    pub w_in: VarId,
    pub w_hr: VarId,
    pub w_hz: VarId,
    pub w_hn: VarId,
    pub b_ir: VarId,
    pub b_iz: VarId,
    pub b_in: VarId,
    pub b_hr: VarId,
    pub b_hz: VarId,
    pub b_hn: VarId,
}

/// D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I. The input
/// must be square and symmetric with a zero diagonal; self loops are
/// added here, never earlier.
pub fn normalize_adjacency(tape: &mut Tape, a: VarId) -> VarId {
    {
        let v = tape.value(a);
        let (n, m) = v.shape();
        assert_eq!(n, m, "adjacency must be square");
        for i in 0..n {
            assert_eq!(v.get(i, i), 0.0, "diagonal must be zero before self loops");
            for j in (i + 1)..n {
                assert!(
                    (v.get(i, j) - v.get(j, i)).abs() < 1e-9,
                    "adjacency must be symmetric at ({i}, {j})"
                );
            }
        }
    }
    let n = tape.value(a).shape().0;
    let eye = tape.leaf(Mat::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }));
    let a_hat = tape.add(a, eye);
    let deg = tape.row_sum(a_hat);
    let dinv = tape.rsqrt(deg);
    let scaled = tape.mul_colvec(a_hat, dinv);
    let dinv_row = tape.transpose_var(dinv);
    tape.mul_rowvec(scaled, dinv_row)
}

/// ReLU graph convolutions: H^(l+1) = relu(A_norm H^(l) W^(l)). Returns
/// every layer output including the input, for the skip readout.
pub fn gcn_forward(tape: &mut Tape, a_norm: VarId, h0: VarId, layers: &[VarId]) -> Vec<VarId> {
    let mut outs = Vec::with_capacity(layers.len() + 1);
    outs.push(h0);
    let mut h = h0;
    for &w in layers {
        let ah = tape.matmul_t(a_norm, h, false, false);
        let hw = tape.linear(ah, w);
        h = tape.relu(hw);
        outs.push(h);
    }
    outs
}

/// Concatenate every layer's representation and map it back to the
/// hidden width, so deep layers cannot wash out the input.
pub fn skip_readout(tape: &mut Tape, layer_outputs: &[VarId], w_r: VarId) -> VarId {
    assert!(!layer_outputs.is_empty());
    let cat = if layer_outputs.len() == 1 {
        layer_outputs[0]
    } else {
        tape.concat_cols(layer_outputs)
    };
    tape.linear(cat, w_r)
}

/// One GRU step: r and z gates, candidate n, h' = (1 - z) n + z h.
/// `x` and `h` hold one row per sequence being advanced.
pub fn gru_cell(tape: &mut Tape, p: &GruParams, x: VarId, h: VarId) -> VarId {
    let gate = |tape: &mut Tape, wi, bi, wh, bh| {
        let xi = tape.linear(x, wi);
        let xi = tape.add_row(xi, bi);
        let hh = tape.linear(h, wh);
        let hh = tape.add_row(hh, bh);
        tape.add(xi, hh)
    };
    let r_pre = gate(tape, p.w_ir, p.b_ir, p.w_hr, p.b_hr);
    let r = tape.sigmoid(r_pre);
    let z_pre = gate(tape, p.w_iz, p.b_iz, p.w_hz, p.b_hz);
    let z = tape.sigmoid(z_pre);
    let xn = tape.linear(x, p.w_in);
    let xn = tape.add_row(xn, p.b_in);
    let hn = tape.linear(h, p.w_hn);
    let hn = tape.add_row(hn, p.b_hn);
    let rhn = tape.mul(r, hn);
    let n_pre = tape.add(xn, rhn);
    let n = tape.tanh(n_pre);
    let keep = tape.mul(z, h);
    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let take = tape.mul(one_minus_z, n);
    tape.add(take, keep)
}

/// Run the cell over a sequence of inputs from a zero hidden state and
/// return the final hidden state.
pub fn gru_aggregate(tape: &mut Tape, p: &GruParams, xs: &[VarId]) -> VarId {
    assert!(!xs.is_empty(), "the aggregation window must not be empty");
    let rows = tape.value(xs[0]).shape().0;
    let hidden = tape.value(p.w_hr).shape().0;
    let mut h = tape.leaf(Mat::zeros(rows, hidden));
    for &x in xs {
        h = gru_cell(tape, p, x, h);
    }
    h
}
