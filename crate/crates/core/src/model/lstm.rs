use ndarray::{s, Array1, Array2, Axis};

use super::LstmLayer;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-timestep activations of one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `T × input_size`
    pub inputs: Array2<f64>,
    /// Post-activation gates `T × 4c`, ordered input, forget, candidate, output.
    pub gates: Array2<f64>,
    /// Cell state `T × c`.
    pub cells: Array2<f64>,
    /// `tanh` of the cell state.
    pub cell_tanh: Array2<f64>,
    /// Unprojected hidden output `T × c`.
    pub hidden: Array2<f64>,
    /// Emitted (projected) output `T × output_size`.
    pub outputs: Array2<f64>,
}

impl LayerTrace {
    pub fn steps(&self) -> usize {
        self.inputs.nrows()
    }

    pub(crate) fn matches(&self, layer: &LstmLayer) -> bool {
        self.inputs.ncols() == layer.input_size()
            && self.gates.ncols() == 4 * layer.cell_size()
            && self.outputs.ncols() == layer.output_size()
    }
}

pub(crate) fn forward_layer(layer: &LstmLayer, inputs: Array2<f64>) -> LayerTrace {
    let steps = inputs.nrows();
    let c = layer.cell_size();
    let out_dim = layer.output_size();

    // Input contribution for every step at once.
    let mut gates = inputs.dot(&layer.input_weights.t()) + &layer.bias;
    let mut cells = Array2::zeros((steps, c));
    let mut cell_tanh = Array2::zeros((steps, c));
    let mut hidden = Array2::zeros((steps, c));
    let mut outputs = Array2::zeros((steps, out_dim));

    let mut prev_out = Array1::<f64>::zeros(out_dim);
    let mut prev_cell = Array1::<f64>::zeros(c);
    for t in 0..steps {
        let recur = layer.recurrent_weights.dot(&prev_out);
        let mut a = gates.row_mut(t);
        a += &recur;
        for k in 0..c {
            a[k] = sigmoid(a[k]);
            a[c + k] = sigmoid(a[c + k]);
            a[2 * c + k] = a[2 * c + k].tanh();
            a[3 * c + k] = sigmoid(a[3 * c + k]);
            let cell = a[c + k] * prev_cell[k] + a[k] * a[2 * c + k];
            let th = cell.tanh();
            cells[[t, k]] = cell;
            cell_tanh[[t, k]] = th;
            hidden[[t, k]] = a[3 * c + k] * th;
        }
        let h = hidden.row(t);
        let out = match &layer.projection {
            Some(p) => p.dot(&h),
            None => h.to_owned(),
        };
        outputs.row_mut(t).assign(&out);
        prev_cell = cells.row(t).to_owned();
        prev_out = out;
    }
    LayerTrace {
        inputs,
        gates,
        cells,
        cell_tanh,
        hidden,
        outputs,
    }
}

/// Backpropagation through time for one layer. `d_out` is the gradient on
/// every emitted output; accumulates into `grad` and returns the gradient
/// on the layer inputs.
pub(crate) fn backward_layer(
    layer: &LstmLayer,
    trace: &LayerTrace,
    d_out: &Array2<f64>,
    grad: &mut LstmLayer,
) -> Array2<f64> {
    let steps = trace.steps();
    let c = layer.cell_size();
    let out_dim = layer.output_size();

    let mut d_pre = Array2::<f64>::zeros((steps, 4 * c));
    let mut d_emitted = Array2::<f64>::zeros((steps, out_dim));
    let mut d_recur = Array1::<f64>::zeros(out_dim);
    let mut d_cell_next = Array1::<f64>::zeros(c);

    for t in (0..steps).rev() {
        let dr = &d_out.row(t) + &d_recur;
        let dh = match &layer.projection {
            Some(p) => p.t().dot(&dr),
            None => dr.clone(),
        };
        d_emitted.row_mut(t).assign(&dr);

        let g = trace.gates.row(t);
        let mut da = d_pre.row_mut(t);
        for k in 0..c {
            let (i, f, cand, o) = (g[k], g[c + k], g[2 * c + k], g[3 * c + k]);
            let th = trace.cell_tanh[[t, k]];
            let prev_cell = if t > 0 { trace.cells[[t - 1, k]] } else { 0.0 };
            let dc = d_cell_next[k] + dh[k] * o * (1.0 - th * th);
            da[k] = dc * cand * i * (1.0 - i);
            da[c + k] = dc * prev_cell * f * (1.0 - f);
            da[2 * c + k] = dc * i * (1.0 - cand * cand);
            da[3 * c + k] = dh[k] * th * o * (1.0 - o);
            d_cell_next[k] = dc * f;
        }
        d_recur = layer.recurrent_weights.t().dot(&da);
    }

    grad.input_weights += &d_pre.t().dot(&trace.inputs);
    if steps > 1 {
        grad.recurrent_weights += &d_pre
            .slice(s![1.., ..])
            .t()
            .dot(&trace.outputs.slice(s![..steps - 1, ..]));
    }
    grad.bias += &d_pre.sum_axis(Axis(0));
    if let Some(p) = grad.projection.as_mut() {
        *p += &d_emitted.t().dot(&trace.hidden);
    }
    d_pre.dot(&layer.input_weights)
}
