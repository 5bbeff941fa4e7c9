//! Stacked LSTM cells with a batched forward pass that caches
//! activations and a reverse-time backward pass over the cache.
//!
//! Weight matrices are stored input-major (`[in, 4W]`) so each step is
//! a plain `x.dot(w)`. The gate axis is ordered `[input | forget |
//! cell | output]` in chunks of the layer width.

use ndarray::{s, Array1, Array2, Axis};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM layer's parameters.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    /// Input weights, `[in_dim, 4*width]`.
    pub w_ih: Array2<f64>,
    /// Recurrent weights, `[width, 4*width]`.
    pub w_hh: Array2<f64>,
    /// Gate biases, `[4*width]`.
    pub b: Array1<f64>,
}

impl LstmLayer {
    pub fn width(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b.len()
    }

    /// One batched step. Returns the cache entry holding everything the
    /// backward pass needs.
    pub fn forward_step(
        &self,
        x: &Array2<f64>,
        h_prev: &Array2<f64>,
        c_prev: &Array2<f64>,
    ) -> StepCache {
        let w = self.width();
        let mut pre = x.dot(&self.w_ih) + h_prev.dot(&self.w_hh);
        pre += &self.b;

        let i = pre.slice(s![.., 0..w]).mapv(sigmoid);
        let f = pre.slice(s![.., w..2 * w]).mapv(sigmoid);
        let g = pre.slice(s![.., 2 * w..3 * w]).mapv(f64::tanh);
        let o = pre.slice(s![.., 3 * w..4 * w]).mapv(sigmoid);

        let c = &f * c_prev + &i * &g;
        let tc = c.mapv(f64::tanh);
        let h = &o * &tc;

        StepCache { x: x.clone(), i, f, g, o, c, tc, h }
    }
}

/// Per-step activations for one layer.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Array2<f64>,
    pub i: Array2<f64>,
    pub f: Array2<f64>,
    pub g: Array2<f64>,
    pub o: Array2<f64>,
    pub c: Array2<f64>,
    pub tc: Array2<f64>,
    pub h: Array2<f64>,
}

/// Accumulated parameter gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dw_ih: Array2<f64>,
    pub dw_hh: Array2<f64>,
    pub db: Array1<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &LstmLayer) -> Self {
        Self {
            dw_ih: Array2::zeros(layer.w_ih.raw_dim()),
            dw_hh: Array2::zeros(layer.w_hh.raw_dim()),
            db: Array1::zeros(layer.b.len()),
        }
    }
}

/// Backward pass through one layer's full unroll.
///
/// `dh_in[t]` is the gradient arriving at the layer's hidden output at
/// step `t` from its consumers (the output head or the layer above).
/// Returns the gradient with respect to the layer's inputs per step;
/// for the bottom layer these fall on constant data and are discarded.
pub fn backward_layer(
    layer: &LstmLayer,
    steps: &[StepCache],
    dh_in: &[Array2<f64>],
    grads: &mut LayerGrads,
) -> Vec<Array2<f64>> {
    let t_total = steps.len();
    assert_eq!(dh_in.len(), t_total);
    let batch = steps[0].x.nrows();
    let w = layer.width();
    let in_dim = layer.input_dim();

    let mut dx_out: Vec<Array2<f64>> = Vec::with_capacity(t_total);
    dx_out.resize(t_total, Array2::zeros((batch, in_dim)));

    let mut dh_rec: Array2<f64> = Array2::zeros((batch, w));
    let mut dc_rec: Array2<f64> = Array2::zeros((batch, w));
    let zeros = Array2::<f64>::zeros((batch, w));

    for t in (0..t_total).rev() {
        let sc = &steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&steps[t - 1].h, &steps[t - 1].c)
        };

        let dh = &dh_in[t] + &dh_rec;
        let d_o = &dh * &sc.tc;
        let dc = &dh * &sc.o * sc.tc.mapv(|v| 1.0 - v * v) + &dc_rec;
        let di = &dc * &sc.g;
        let dg = &dc * &sc.i;
        let df = &dc * c_prev;
        dc_rec = &dc * &sc.f;

        // pre-activation gradients
        let dzi = di * &sc.i * sc.i.mapv(|v| 1.0 - v);
        let dzf = df * &sc.f * sc.f.mapv(|v| 1.0 - v);
        let dzg = dg * sc.g.mapv(|v| 1.0 - v * v);
        let dzo = d_o * &sc.o * sc.o.mapv(|v| 1.0 - v);

        let mut dz = Array2::<f64>::zeros((batch, 4 * w));
        dz.slice_mut(s![.., 0..w]).assign(&dzi);
        dz.slice_mut(s![.., w..2 * w]).assign(&dzf);
        dz.slice_mut(s![.., 2 * w..3 * w]).assign(&dzg);
        dz.slice_mut(s![.., 3 * w..4 * w]).assign(&dzo);

        grads.dw_ih += &sc.x.t().dot(&dz);
        grads.dw_hh += &h_prev.t().dot(&dz);
        grads.db += &dz.sum_axis(Axis(0));

        dh_rec = dz.dot(&layer.w_hh.t());
        dx_out[t] = dz.dot(&layer.w_ih.t());
    }

    dx_out
}
