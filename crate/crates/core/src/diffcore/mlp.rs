use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, ParamId, ParamStore};

/// Fully connected network: ReLU hidden layers, linear output.
///
/// `skips` lists layer indices whose input is concatenated with an auxiliary
/// skip vector of width `skip_dim` (layer 0 consumes the primary input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub skips: Vec<usize>,
    #[serde(default)]
    pub skip_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            skips: Vec::new(),
            skip_dim: 0,
        }
    }

    pub fn with_skip(mut self, layer: usize, skip_dim: usize) -> Self {
        self.skips.push(layer);
        self.skip_dim = skip_dim;
        self
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.hidden.is_empty() {
            return Err(DiffError::InvalidSpec("at least one hidden layer required"));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(DiffError::InvalidSpec("zero-width layer"));
        }
        if self.skips.iter().any(|&k| k > self.hidden.len()) {
            return Err(DiffError::InvalidSpec("skip index beyond network depth"));
        }
        if !self.skips.is_empty() && self.skip_dim == 0 {
            return Err(DiffError::InvalidSpec("skip layers need skip_dim > 0"));
        }
        Ok(())
    }

    /// Number of weight layers (hidden + output).
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
    skip: bool,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    input_dots: Option<Vec<Array2<f64>>>,
    rows: usize,
    depth: usize,
}

impl MlpTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Gradients with respect to the network inputs (and their tangents).
#[derive(Debug, Clone, Default)]
pub struct MlpGrads {
    pub input: Option<Array2<f64>>,
    pub skip: Option<Array2<f64>>,
    pub input_dot: Option<Array2<f64>>,
    pub skip_dot: Option<Array2<f64>>,
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), DiffError> {
    if expected != got {
        return Err(DiffError::Shape { what, expected, got });
    }
    Ok(())
}

impl Mlp {
    /// Registers the network's parameters under `prefix` in `store`.
    pub fn new(spec: MlpSpec, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self, DiffError> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.depth());
        let mut prev = spec.input_dim;
        for i in 0..spec.depth() {
            let skip = spec.skips.contains(&i);
            let fan_in = prev + if skip { spec.skip_dim } else { 0 };
            let fan_out = if i < spec.hidden.len() { spec.hidden[i] } else { spec.output_dim };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound));
            let w = store.add(format!("{prefix}.l{i}.w"), w)?;
            let b = store.add(format!("{prefix}.l{i}.b"), Array2::zeros((1, fan_out)))?;
            layers.push(Layer { w, b, skip });
            prev = fan_out;
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn output_weight(&self) -> ParamId {
        self.layers.last().unwrap().w
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers.last().unwrap().b
    }

    pub fn layer_params(&self, i: usize) -> (ParamId, ParamId) {
        (self.layers[i].w, self.layers[i].b)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        skip: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, MlpTrace), DiffError> {
        let (y, _, trace) = self.run(store, x, skip, None)?;
        Ok((y, trace))
    }

    /// Forward pass that also propagates the tangents `x_dot` / `skip_dot`,
    /// returning `(y, y_dot, trace)`.
    pub fn forward_tangent(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        x_dot: ArrayView2<f64>,
        skip: Option<ArrayView2<f64>>,
        skip_dot: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>, MlpTrace), DiffError> {
        check("input tangent rows", x.nrows(), x_dot.nrows())?;
        check("input tangent cols", x.ncols(), x_dot.ncols())?;
        let (y, y_dot, trace) = self.run(store, x, skip, Some((x_dot, skip_dot)))?;
        Ok((y, y_dot.unwrap(), trace))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        skip: Option<ArrayView2<f64>>,
        tangent: Option<(ArrayView2<f64>, Option<ArrayView2<f64>>)>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>, MlpTrace), DiffError> {
        check("mlp input", self.spec.input_dim, x.ncols())?;
        let n = x.nrows();
        let uses_skip = !self.spec.skips.is_empty();
        let skip = match (uses_skip, skip) {
            (true, Some(s)) => {
                check("skip input cols", self.spec.skip_dim, s.ncols())?;
                check("skip input rows", n, s.nrows())?;
                Some(s)
            }
            (true, None) => return Err(DiffError::Shape { what: "skip input", expected: self.spec.skip_dim, got: 0 }),
            (false, _) => None,
        };
        let skip_dot = match &tangent {
            Some((_, Some(sd))) => Some(sd.to_owned()),
            Some((_, None)) => skip.map(|s| Array2::zeros(s.raw_dim())),
            None => None,
        };

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut input_dots = tangent.as_ref().map(|_| Vec::with_capacity(self.layers.len()));

        let mut h = x.to_owned();
        let mut h_dot = tangent.as_ref().map(|(xd, _)| xd.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = if layer.skip {
                {
                    let sk = skip.unwrap();
                    concatenate(Axis(1), &[h.view(), sk.view()]).unwrap()
                }
            } else {
                h
            };
            let a_dot = h_dot.map(|hd| {
                if layer.skip {
                    concatenate(Axis(1), &[hd.view(), skip_dot.as_ref().unwrap().view()]).unwrap()
                } else {
                    hd
                }
            });
            let w = store.value(layer.w);
            check("layer input", w.nrows(), a.ncols())?;
            let z = a.dot(w) + store.value(layer.b);
            let z_dot = a_dot.as_ref().map(|ad| ad.dot(w));
            if i < last {
                h = z.mapv(|v| v.max(0.0));
                h_dot = z_dot.as_ref().map(|zd| {
                    let mut hd = zd.clone();
                    hd.zip_mut_with(&z, |d, &zz| {
                        if zz <= 0.0 {
                            *d = 0.0
                        }
                    });
                    hd
                });
                pre.push(z);
            } else {
                h = z;
                h_dot = z_dot;
            }
            inputs.push(a);
            if let (Some(ids), Some(ad)) = (input_dots.as_mut(), a_dot) {
                ids.push(ad);
            }
        }
        let trace = MlpTrace {
            inputs,
            pre,
            input_dots,
            rows: n,
            depth: self.layers.len(),
        };
        Ok((h, h_dot, trace))
    }

    /// Accumulates parameter gradients for `d loss / d y = g_out` (and
    /// `d loss / d y_dot = g_out_dot` when the trace carries tangents).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        trace: &MlpTrace,
        g_out: ArrayView2<f64>,
        g_out_dot: Option<ArrayView2<f64>>,
        need_input_grads: bool,
    ) -> Result<MlpGrads, DiffError> {
        if trace.depth != self.layers.len() {
            return Err(DiffError::ForeignTrace("layer count"));
        }
        check("output gradient rows", trace.rows, g_out.nrows())?;
        check("output gradient cols", self.spec.output_dim, g_out.ncols())?;
        if g_out_dot.is_some() && trace.input_dots.is_none() {
            return Err(DiffError::ForeignTrace("tangent gradient given for a value-only trace"));
        }
        let with_tan = g_out_dot.is_some();
        let mut gz = g_out.to_owned();
        let mut gz_dot = g_out_dot.map(|g| g.to_owned());
        let mut grads = MlpGrads::default();
        let mut g_skip: Option<Array2<f64>> = None;
        let mut g_skip_dot: Option<Array2<f64>> = None;

        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let a = &trace.inputs[i];
            check("trace layer input", store.value(layer.w).nrows(), a.ncols())?;
            {
                let p = store.get_mut(layer.w);
                general_mat_mul(1.0, &a.t(), &gz, 1.0, &mut p.grad);
                if let (Some(gzd), Some(ids)) = (gz_dot.as_ref(), trace.input_dots.as_ref()) {
                    general_mat_mul(1.0, &ids[i].t(), gzd, 1.0, &mut p.grad);
                }
            }
            {
                let gb = gz.sum_axis(Axis(0));
                let mut b = store.grad_mut(layer.b).row_mut(0);
                b += &gb;
            }
            if i == 0 && !need_input_grads && !layer.skip {
                break;
            }
            let w = store.value(layer.w);
            let ga = gz.dot(&w.t());
            let ga_dot = gz_dot.as_ref().map(|g| g.dot(&w.t()));
            let h_width = if layer.skip { w.nrows() - self.spec.skip_dim } else { w.nrows() };
            if layer.skip {
                let gs = ga.slice(s![.., h_width..]).to_owned();
                g_skip = Some(match g_skip {
                    Some(acc) => acc + gs,
                    None => gs,
                });
                if let Some(gad) = ga_dot.as_ref() {
                    let gs = gad.slice(s![.., h_width..]).to_owned();
                    g_skip_dot = Some(match g_skip_dot {
                        Some(acc) => acc + gs,
                        None => gs,
                    });
                }
            }
            let gh = ga.slice(s![.., ..h_width]).to_owned();
            let gh_dot = ga_dot.map(|g| g.slice(s![.., ..h_width]).to_owned());
            if i == 0 {
                if need_input_grads {
                    grads.input = Some(gh);
                    grads.input_dot = gh_dot;
                }
                break;
            }
            let z = &trace.pre[i - 1];
            let mut g = gh;
            g.zip_mut_with(z, |gv, &zz| {
                if zz <= 0.0 {
                    *gv = 0.0
                }
            });
            gz = g;
            if with_tan {
                let mut gd = gh_dot.unwrap();
                gd.zip_mut_with(z, |gv, &zz| {
                    if zz <= 0.0 {
                        *gv = 0.0
                    }
                });
                gz_dot = Some(gd);
            }
        }
        grads.skip = g_skip;
        grads.skip_dot = g_skip_dot;
        Ok(grads)
    }
}
