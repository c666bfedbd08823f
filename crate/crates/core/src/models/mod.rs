//! Small classifiers with exact input gradients of cross-entropy.

pub mod dataset;
pub mod io;
pub mod layers;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ColorSpace, ImageTensor, Real};
use layers::{softmax_cross_entropy, Conv3x3, Dense, Layer, Shape};

pub use dataset::{generate_synthetic_dataset, Dataset, SynthDatasetSpec};
pub use io::{load_dataset_split, load_weights, save_dataset, save_weights};
pub use train::{train, TrainConfig, TrainMetrics};

/// What an attack needs from a classifier: logits and the per-sample input
/// gradient of cross-entropy.
pub trait Model<T: Real>: Sync {
    fn num_classes(&self) -> usize;

    /// Row-major `(B, num_classes)` logits.
    fn logits(&self, x: &ImageTensor<T>) -> Result<Vec<T>>;

    /// Per-sample losses `J(x_b, y_b)` and `∂J(x_b, y_b)/∂x_b` for every `b`.
    fn per_sample_loss_grad(&self, x: &ImageTensor<T>, labels: &[usize]) -> Result<(Vec<T>, ImageTensor<T>)>;

    fn predict(&self, x: &ImageTensor<T>) -> Result<Vec<usize>> {
        let k = self.num_classes();
        Ok(self.logits(x)?.chunks(k).map(argmax).collect())
    }

    /// Mean cross-entropy over the batch and its exact input gradient.
    fn loss_and_input_grad(&self, x: &ImageTensor<T>, labels: &[usize]) -> Result<(T, ImageTensor<T>)> {
        let (losses, grad) = self.per_sample_loss_grad(x, labels)?;
        let n = T::lit(losses.len().max(1) as f64);
        let mean = losses.iter().copied().sum::<T>() / n;
        Ok((mean, grad.map(|g| g / n)))
    }
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Two conv blocks and one dense layer.
    SmallCnnA,
    /// Three conv blocks of different widths and two dense layers.
    SmallCnnB,
    /// Dense only.
    SmallMlp,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::SmallCnnA, Arch::SmallCnnB, Arch::SmallMlp];

    pub fn id(self) -> &'static str {
        match self {
            Arch::SmallCnnA => "smallcnn_a",
            Arch::SmallCnnB => "smallcnn_b",
            Arch::SmallMlp => "smallmlp",
        }
    }

    /// Layer skeleton for a `(3, H, W)` input, with `(name, layer index)`
    /// for parametric layers.
    fn skeleton(self, h: usize, w: usize, classes: usize) -> Vec<(Option<&'static str>, LayerSpec)> {
        use LayerSpec::*;
        match self {
            Arch::SmallCnnA => vec![
                (Some("conv1"), Conv(3, 16)),
                (None, Relu),
                (None, Pool),
                (Some("conv2"), Conv(16, 32)),
                (None, Relu),
                (None, Pool),
                (None, Flatten),
                (Some("fc1"), Dense(32 * (h / 4) * (w / 4), classes)),
            ],
            Arch::SmallCnnB => vec![
                (Some("conv1"), Conv(3, 24)),
                (None, Relu),
                (None, Pool),
                (Some("conv2"), Conv(24, 32)),
                (None, Relu),
                (None, Pool),
                (Some("conv3"), Conv(32, 48)),
                (None, Relu),
                (None, Pool),
                (None, Flatten),
                (Some("fc1"), Dense(48 * (h / 8) * (w / 8), 64)),
                (None, Relu),
                (Some("fc2"), Dense(64, classes)),
            ],
            Arch::SmallMlp => vec![
                (None, Flatten),
                (Some("fc1"), Dense(3 * h * w, 128)),
                (None, Relu),
                (Some("fc2"), Dense(128, classes)),
            ],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.id() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
enum LayerSpec {
    Conv(usize, usize),
    Relu,
    Pool,
    Flatten,
    Dense(usize, usize),
}

/// Named parameter tensor view.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Sequential classifier over `(3, H, W)` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    arch: Arch,
    layers: Vec<Layer<T>>,
    names: Vec<Option<&'static str>>,
    num_classes: usize,
    input_shape: Shape,
}

/// Activations recorded by a forward pass: the input of every layer, then
/// the logits.
struct Trace<T> {
    values: Vec<Vec<T>>,
    shapes: Vec<Shape>,
}

impl<T: Real> Classifier<T> {
    /// He-uniform initialization drawn from `seed`.
    pub fn new(arch: Arch, input_shape: Shape, num_classes: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c != 3 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "classifiers take 3-channel inputs with sides divisible by 8, got {input_shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |fan_in: usize, n: usize| -> Vec<T> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
        };
        let mut layers = Vec::new();
        let mut names = Vec::new();
        for (name, spec) in arch.skeleton(h, w, num_classes) {
            let layer = match spec {
                LayerSpec::Conv(cin, cout) => Layer::Conv3x3(Conv3x3 {
                    in_channels: cin,
                    out_channels: cout,
                    weight: he(cin * 9, cout * cin * 9),
                    bias: vec![T::zero(); cout],
                }),
                LayerSpec::Dense(nin, nout) => Layer::Dense(Dense {
                    inputs: nin,
                    outputs: nout,
                    weight: he(nin, nin * nout),
                    bias: vec![T::zero(); nout],
                }),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Pool => Layer::AvgPool2,
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
            names.push(name);
        }
        let model = Self {
            arch,
            layers,
            names,
            num_classes,
            input_shape,
        };
        model.output_shape()?;
        Ok(model)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn output_shape(&self) -> Result<Shape> {
        let mut s = self.input_shape;
        for l in &self.layers {
            s = l.output_shape(s)?;
        }
        Ok(s)
    }

    /// Parameter tensors in file order: `<arch>/<layer>.weight`, `.bias`.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for (layer, name) in self.layers.iter().zip(&self.names) {
            let (Some((w, b)), Some(name)) = (layer.params(), name) else {
                continue;
            };
            let wdims = match layer {
                Layer::Conv3x3(c) => vec![c.out_channels, c.in_channels, 3, 3],
                Layer::Dense(d) => vec![d.outputs, d.inputs],
                _ => unreachable!(),
            };
            out.push(ParamRef {
                name: format!("{}/{}.weight", self.arch, name),
                dims: wdims,
                data: w,
            });
            out.push(ParamRef {
                name: format!("{}/{}.bias", self.arch, name),
                dims: vec![b.len()],
                data: b,
            });
        }
        out
    }

    /// Mutable parameter buffers in the same order as [`Classifier::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            if let Some((w, b)) = layer.params_mut() {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            names: self.names.clone(),
            num_classes: self.num_classes,
            input_shape: self.input_shape,
        }
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(format!(
                "{} expects inputs {:?}, got {:?}",
                self.arch,
                self.input_shape,
                [c, h, w]
            )));
        }
        if x.color_space() != ColorSpace::Rgb {
            return Err(Error::shape("classifiers take RGB inputs"));
        }
        Ok(())
    }

    fn check_labels(&self, batch: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != batch {
            return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::shape(format!("label {bad} out of range")));
        }
        Ok(())
    }

    fn forward_sample(&self, x: &[T]) -> Vec<T> {
        let mut shape = self.input_shape;
        let mut cur = x.to_vec();
        for l in &self.layers {
            cur = l.forward(&cur, shape);
            shape = l.output_shape(shape).expect("validated at construction");
        }
        cur
    }

    fn trace_sample(&self, x: &[T]) -> Trace<T> {
        let mut shape = self.input_shape;
        let mut values = vec![x.to_vec()];
        let mut shapes = vec![shape];
        for l in &self.layers {
            let next = l.forward(values.last().unwrap(), shape);
            shape = l.output_shape(shape).expect("validated at construction");
            values.push(next);
            shapes.push(shape);
        }
        Trace { values, shapes }
    }

    /// Loss, input gradient and optionally accumulated parameter gradients
    /// for one sample.
    fn backward_sample(&self, x: &[T], label: usize, mut param_grads: Option<&mut [Vec<T>]>) -> (T, Vec<T>) {
        let trace = self.trace_sample(x);
        let (loss, mut g) = softmax_cross_entropy(trace.values.last().unwrap(), label);
        let mut slot = 2 * self.layers.iter().filter(|l| l.params().is_some()).count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pg = match (&mut param_grads, layer.params().is_some()) {
                (Some(pg), true) => {
                    slot -= 2;
                    let (w, rest) = pg[slot..].split_at_mut(1);
                    Some((w[0].as_mut_slice(), rest[0].as_mut_slice()))
                }
                _ => None,
            };
            g = layer.backward(&trace.values[i], trace.shapes[i], &g, pg);
        }
        (loss, g)
    }

    /// Summed loss and summed parameter gradients over the batch.
    pub(crate) fn param_grads(&self, x: &ImageTensor<T>, labels: &[usize]) -> Result<(T, Vec<Vec<T>>)> {
        self.check_input(x)?;
        self.check_labels(x.batch(), labels)?;
        let zero: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        // fixed chunking keeps the reduction order deterministic
        const CHUNK: usize = 8;
        let idx: Vec<usize> = (0..x.batch()).collect();
        let partials: Vec<(T, Vec<Vec<T>>)> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = zero.clone();
                let mut loss = T::zero();
                for &b in chunk {
                    loss += self.backward_sample(x.sample(b), labels[b], Some(&mut acc)).0;
                }
                (loss, acc)
            })
            .collect();
        let mut total = zero;
        let mut loss = T::zero();
        for (l, part) in partials {
            loss += l;
            for (t, p) in total.iter_mut().zip(part) {
                for (a, b) in t.iter_mut().zip(p) {
                    *a += b;
                }
            }
        }
        Ok((loss, total))
    }
}

impl<T: Real> Model<T> for Classifier<T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &ImageTensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let rows: Vec<Vec<T>> = (0..x.batch())
            .into_par_iter()
            .map(|b| self.forward_sample(x.sample(b)))
            .collect();
        let out: Vec<T> = rows.into_iter().flatten().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{} produced non-finite logits", self.arch)));
        }
        Ok(out)
    }

    fn per_sample_loss_grad(&self, x: &ImageTensor<T>, labels: &[usize]) -> Result<(Vec<T>, ImageTensor<T>)> {
        self.check_input(x)?;
        self.check_labels(x.batch(), labels)?;
        let parts: Vec<(T, Vec<T>)> = (0..x.batch())
            .into_par_iter()
            .map(|b| self.backward_sample(x.sample(b), labels[b], None))
            .collect();
        let mut losses = Vec::with_capacity(parts.len());
        let mut data = Vec::with_capacity(x.data().len());
        for (l, g) in parts {
            losses.push(l);
            data.extend(g);
        }
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{} produced a non-finite loss", self.arch)));
        }
        Ok((losses, x.with_data(data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64, b: usize) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 3 * 32 * 32).map(|_| rng.gen::<f64>()).collect();
        ImageTensor::new([b, 3, 32, 32], data, ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn zoo_has_three_distinct_architectures() {
        let sizes: Vec<usize> = Arch::ALL
            .iter()
            .map(|&a| Classifier::<f32>::new(a, [3, 32, 32], 10, 0).unwrap().num_params())
            .collect();
        assert_eq!(sizes.len(), 3);
        assert!(sizes[0] != sizes[1] && sizes[1] != sizes[2] && sizes[0] != sizes[2]);
        let a = Classifier::<f32>::new(Arch::SmallCnnA, [3, 32, 32], 10, 0).unwrap();
        let convs = |m: &Classifier<f32>| m.layers().iter().filter(|l| matches!(l, Layer::Conv3x3(_))).count();
        assert_eq!(convs(&a), 2);
        assert_eq!(convs(&Classifier::new(Arch::SmallCnnB, [3, 32, 32], 10, 0).unwrap()), 3);
        assert_eq!(convs(&Classifier::new(Arch::SmallMlp, [3, 32, 32], 10, 0).unwrap()), 0);
    }

    #[test]
    fn logits_are_finite_with_expected_shape() {
        for arch in Arch::ALL {
            let m = Classifier::<f64>::new(arch, [3, 32, 32], 10, 1).unwrap();
            let z = m.logits(&random_input(2, 3)).unwrap();
            assert_eq!(z.len(), 30);
            assert!(z.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mean_gradient_is_scaled_per_sample_gradient() {
        let m = Classifier::<f64>::new(Arch::SmallMlp, [3, 32, 32], 10, 3).unwrap();
        let x = random_input(4, 2);
        let (losses, g) = m.per_sample_loss_grad(&x, &[1, 5]).unwrap();
        let (mean, gm) = m.loss_and_input_grad(&x, &[1, 5]).unwrap();
        assert!((mean - (losses[0] + losses[1]) / 2.0).abs() < 1e-12);
        for (a, b) in g.data().iter().zip(gm.data()) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (k, arch) in Arch::ALL.into_iter().enumerate() {
            let m = Classifier::<f64>::new(arch, [3, 32, 32], 10, 10 + k as u64).unwrap();
            let x = random_input(20 + k as u64, 2);
            let labels = [3, 8];
            let (_, g) = m.loss_and_input_grad(&x, &labels).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            let f = |x: &ImageTensor<f64>| m.loss_and_input_grad(x, &labels).unwrap().0;
            let f0 = f(&x);
            let (mut num, mut den, mut checked) = (0.0, 0.0, 0);
            while checked < 40 {
                let i = rng.gen_range(0..x.data().len());
                let mut xp = x.clone();
                xp.data_mut()[i] += 1e-4;
                let mut xm = x.clone();
                xm.data_mut()[i] -= 1e-4;
                let (fp, fm) = (f(&xp), f(&xm));
                // a ReLU kink inside [x-h, x+h] makes the one-sided slopes disagree
                let (right, left) = ((fp - f0) / 1e-4, (f0 - fm) / 1e-4);
                if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-6) {
                    continue;
                }
                let fd = (fp - fm) / 2e-4;
                num += (fd - g.data()[i]).powi(2);
                den += fd * fd;
                checked += 1;
            }
            assert!((num / den).sqrt() <= 1e-4, "{arch}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Classifier::<f32>::new(Arch::SmallCnnA, [3, 32, 32], 10, 0).unwrap();
        let x = ImageTensor::<f32>::zeros([1, 3, 16, 16], ColorSpace::Rgb);
        assert!(matches!(m.logits(&x), Err(Error::Shape(_))));
        let x = ImageTensor::<f32>::zeros([1, 3, 32, 32], ColorSpace::Rgb);
        assert!(m.per_sample_loss_grad(&x, &[10]).is_err());
        assert!(m.per_sample_loss_grad(&x, &[1, 2]).is_err());
        assert!(Classifier::<f32>::new(Arch::SmallCnnA, [3, 30, 32], 10, 0).is_err());
    }

    #[test]
    fn arch_ids_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.id().parse::<Arch>().unwrap(), a);
        }
        assert!("resnet".parse::<Arch>().is_err());
    }
}
