//! Text + style to normalized phoneme-level prosody.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NUM_CONV_LAYERS: usize = 5;
pub const OUTPUT_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub num_conv_layers: usize,
    pub kernel_width: usize,
    pub channels: usize,
    pub dropout_rate: f64,
    pub output_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            num_conv_layers: NUM_CONV_LAYERS,
            kernel_width: 5,
            channels: 256,
            dropout_rate: 0.2,
            output_dim: OUTPUT_DIM,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_conv_layers != NUM_CONV_LAYERS {
            return Err(Error::config("predictor.num_conv_layers", "must be 5"));
        }
        if self.output_dim != OUTPUT_DIM {
            return Err(Error::config("predictor.output_dim", "must be 3 (pitch, duration, energy)"));
        }
        if self.kernel_width == 0 {
            return Err(Error::config("predictor.kernel_width", "must be positive"));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::config("predictor.channels", "must be positive and even"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("predictor.dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal table: `(n, 2i) = sin(n / 10000^(2i/D))`,
/// `(n, 2i+1) = cos(n / 10000^(2i/D))`.
pub fn positional_encoding(n: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config("predictor.channels", format!("positional encoding needs an even width, got {dim}")));
    }
    if n == 0 {
        return Err(Error::input("positional encoding needs at least one position"));
    }
    let mut t = Tensor::zeros(n, dim);
    for pos in 0..n {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            t.set(pos, 2 * i, angle.sin());
            t.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct ProsodyPredictor {
    pub config: PredictorConfig,
    pub text_dim: usize,
    pub style_dim: usize,
    pub input_projection: Linear,
    pub convs: Vec<Conv1d>,
    norms: Vec<LayerNorm>,
    output: Linear,
}

impl ProsodyPredictor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &PredictorConfig,
        text_dim: usize,
        style_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let input_projection = Linear::new(store, "predictor.input", text_dim + style_dim, ch, rng);
        let convs = (0..NUM_CONV_LAYERS)
            .map(|i| Conv1d::new(store, &format!("predictor.conv.{i}"), ch, ch, config.kernel_width, rng))
            .collect();
        let norms = (0..NUM_CONV_LAYERS)
            .map(|i| LayerNorm::new(store, &format!("predictor.norm.{i}"), ch))
            .collect();
        let output = Linear::new(store, "predictor.output", ch, OUTPUT_DIM, rng);
        Ok(Self {
            config: config.clone(),
            text_dim,
            style_dim,
            input_projection,
            convs,
            norms,
            output,
        })
    }

    /// `text_enc` is `N x text_dim`, `style` is `1 x style_dim`; returns `N x 3`.
    pub fn predict_prosody(&self, g: &mut Graph, text_enc: Var, style: Var) -> Result<Var> {
        let (n, d) = g.shape(text_enc);
        if d != self.text_dim {
            return Err(Error::input(format!("text encoding width {d}, expected {}", self.text_dim)));
        }
        if g.shape(style) != (1, self.style_dim) {
            return Err(Error::input(format!(
                "style embedding shape {:?}, expected (1, {})",
                g.shape(style),
                self.style_dim
            )));
        }
        if n == 0 {
            return Err(Error::input("empty text encoding"));
        }
        let styles = g.repeat_rows(style, n);
        let x = g.concat_cols(&[text_enc, styles]);
        let x = self.input_projection.forward(g, x);
        let pe = g.constant(positional_encoding(n, self.config.channels)?);
        let mut h = g.add(x, pe);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h);
            h = norm.forward(g, h);
            h = g.relu(h);
            h = g.dropout(h, self.config.dropout_rate);
        }
        Ok(self.output.forward(g, h))
    }
}

/// Mean absolute error over all entries.
pub fn prosody_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::input(format!(
            "prediction shape {:?} differs from target {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let d = g.sub(pred, target);
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use crate::params::{Adam, Gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PredictorConfig {
        PredictorConfig {
            kernel_width: 3,
            channels: 6,
            ..PredictorConfig::default()
        }
    }

    fn build() -> (ParamStore, ProsodyPredictor) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ProsodyPredictor::new(&mut store, &small(), 4, 3, &mut rng).unwrap();
        (store, p)
    }

    fn loss_value(pred: &Tensor, target: &Tensor) -> f64 {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let p = g.constant(pred.clone());
        let t = g.constant(target.clone());
        let l = prosody_loss(&mut g, p, t).unwrap();
        g.scalar(l)
    }

    #[test]
    fn positional_encoding_properties() {
        let pe = positional_encoding(512, 64).unwrap();
        for i in 0..32 {
            assert_eq!(pe.get(0, 2 * i), 0.0);
            assert_eq!(pe.get(0, 2 * i + 1), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // no two rows coincide
        let mut min_dist = f64::INFINITY;
        for a in 0..512 {
            for b in a + 1..512 {
                let d: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 1e-6, "closest rows at squared distance {min_dist}");
        assert!(matches!(positional_encoding(4, 7), Err(Error::Config { .. })));
    }

    #[test]
    fn config_is_pinned_to_five_layers_and_three_outputs() {
        let c = PredictorConfig::default();
        assert_eq!(c.num_conv_layers, 5);
        assert_eq!(c.output_dim, 3);
        assert!(PredictorConfig { num_conv_layers: 4, ..c.clone() }.validate().is_err());
        assert!(PredictorConfig { output_dim: 2, ..c }.validate().is_err());
        let (_, p) = build();
        assert_eq!(p.convs.len(), 5);
    }

    #[test]
    fn output_shape_and_dimension_errors() {
        let (store, p) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&store);
        let text = g.constant(Tensor::randn(12, 4, 1.0, &mut rng));
        let style = g.constant(Tensor::randn(1, 3, 1.0, &mut rng));
        let out = p.predict_prosody(&mut g, text, style).unwrap();
        assert_eq!(g.shape(out), (12, 3));
        let bad_style = g.constant(Tensor::randn(1, 2, 1.0, &mut rng));
        assert!(matches!(p.predict_prosody(&mut g, text, bad_style), Err(Error::Input(_))));
    }

    #[test]
    fn loss_examples() {
        let t = Tensor::from_rows(&[vec![0.1, -0.3, 0.7], vec![1.2, 0.0, -0.5]]);
        assert_eq!(loss_value(&t, &t), 0.0);
        assert!((loss_value(&t.map(|x| x + 1.0), &t) - 1.0).abs() < 1e-15);
        let p = Tensor::from_rows(&[vec![0.5, 0.2, 0.1], vec![-1.0, 0.4, 0.0]]);
        // |0.4| + |0.5| + |0.6| + |2.2| + |0.4| + |0.5| = 4.6
        assert!((loss_value(&p, &t) - 4.6 / 6.0).abs() < 1e-12);
        assert_eq!(loss_value(&p, &t), loss_value(&t, &p));
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 3));
        assert!(prosody_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn first_conv_gradient_matches_central_differences() {
        let (store, p) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let text = Tensor::randn(4, 4, 1.0, &mut rng);
        let style = Tensor::randn(1, 3, 1.0, &mut rng);
        let target = Tensor::randn(4, 3, 1.0, &mut rng);
        let report = check_param_gradient(&store, p.convs[0].kernel, 1e-3, 200, |g| {
            let t = g.constant(text.clone());
            let s = g.constant(style.clone());
            let out = p.predict_prosody(g, t, s).unwrap();
            let tg = g.constant(target.clone());
            prosody_loss(g, out, tg).unwrap()
        });
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn style_pathway_is_live_after_training_step() {
        let (mut store, p) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let text = Tensor::randn(5, 4, 1.0, &mut rng);
        let style_a = Tensor::randn(1, 3, 1.0, &mut rng);
        let style_b = Tensor::randn(1, 3, 1.0, &mut rng);
        let target = Tensor::randn(5, 3, 1.0, &mut rng);
        let mut opt = Adam::new(&store);
        let grads = {
            let mut g = Graph::new(&store);
            let t = g.constant(text.clone());
            let s = g.constant(style_a.clone());
            let out = p.predict_prosody(&mut g, t, s).unwrap();
            let tg = g.constant(target);
            let l = prosody_loss(&mut g, out, tg).unwrap();
            g.backward(l);
            g.param_grads()
        };
        let mut acc = Gradients::zeros_like(&store);
        acc.accumulate(&grads, 1.0);
        opt.update(&mut store, &acc, 1e-2);
        let mut g = Graph::new(&store);
        let t = g.constant(text);
        let sa = g.constant(style_a);
        let sb = g.constant(style_b);
        let a = p.predict_prosody(&mut g, t, sa).unwrap();
        let b = p.predict_prosody(&mut g, t, sb).unwrap();
        let diff = g.value(a).zip_map(g.value(b), |x, y| (x - y).abs()).max_abs();
        assert!(diff > 1e-6);
    }
}
