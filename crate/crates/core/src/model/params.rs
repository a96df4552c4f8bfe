use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Grads, Graph, Real, Tensor, Var};

/// Named parameter arrays, in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for Weights<T> {
    fn default() -> Self {
        Weights { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> Weights<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn set(&mut self, i: usize, t: Tensor<T>) {
        assert_eq!(t.shape(), self.tensors[i].shape(), "shape change for {}", self.names[i]);
        self.tensors[i] = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Builds parameters with their initializers.
pub(crate) struct Init<'r, R: Rng> {
    pub weights: Weights<f32>,
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (1.0 / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0, std).unwrap();
        let w = Tensor::from_fn([fan_in, fan_out], |_| normal.sample(self.rng));
        self.weights.insert(format!("{name}.w"), w);
        self.weights.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weights.insert(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
        self.weights.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
    }

    /// Bias-free projection.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (1.0 / fan_in as f64).sqrt() as f32;
        let normal = Normal::new(0.0, std).unwrap();
        self.weights.insert(name, Tensor::from_fn([fan_in, fan_out], |_| normal.sample(self.rng)));
    }

    pub fn norm(&mut self, name: &str, width: usize) {
        self.weights.insert(format!("{name}.g"), Tensor::full([width], 1.0));
        self.weights.insert(format!("{name}.b"), Tensor::zeros([width]));
    }

    pub fn vector(&mut self, name: &str, shape: &[usize], std: f32) {
        let normal = Normal::new(0.0, std).unwrap();
        self.weights.insert(name, Tensor::from_fn(shape.to_vec(), |_| normal.sample(self.rng)));
    }
}

/// Binds weights to graph variables on first use.
pub(crate) struct Bind<'a, T: Real> {
    pub g: &'a Graph<T>,
    weights: &'a Weights<T>,
    vars: RefCell<Vec<Option<Var>>>,
    trainable: &'a dyn Fn(&str) -> bool,
}

impl<'a, T: Real> Bind<'a, T> {
    pub fn new(g: &'a Graph<T>, weights: &'a Weights<T>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Bind { g, weights, vars: RefCell::new(vec![None; weights.len()]), trainable }
    }

    pub fn p(&self, name: &str) -> Var {
        let i = self.weights.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let mut vars = self.vars.borrow_mut();
        *vars[i].get_or_insert_with(|| {
            let t = self.weights.tensors[i].clone();
            if (self.trainable)(name) {
                self.g.leaf(t)
            } else {
                self.g.constant(t)
            }
        })
    }

    /// Parameter gradients by weight index; unused or frozen weights are absent.
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<(usize, Vec<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (i, g)))
            .collect()
    }

    pub fn linear(&self, x: Var, name: &str) -> Var {
        self.g.linear(x, self.p(&format!("{name}.w")), Some(self.p(&format!("{name}.b"))))
    }

    pub fn norm(&self, x: Var, name: &str) -> Var {
        self.g.layer_norm(x, self.p(&format!("{name}.g")), self.p(&format!("{name}.b")), 1e-5)
    }

    /// 3×3 same-padded convolution over `batch` channels-last `h × w` maps.
    pub fn conv3(&self, x: Var, name: &str, batch: usize, h: usize, w: usize) -> Var {
        let c = self.g.shape(x).last().copied().unwrap();
        let cols = self.g.remap(x, im2col_map(batch, h, w, c), [batch * h * w, 9 * c]);
        self.linear(cols, name)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum MapKind {
    Im2Col,
    SpaceToDepth,
    DepthToSpace,
}

type MapCache = Mutex<HashMap<(MapKind, usize, usize, usize, usize), Arc<Vec<Option<u32>>>>>;

fn cached(kind: MapKind, b: usize, h: usize, w: usize, c: usize, build: impl FnOnce() -> Vec<Option<u32>>) -> Arc<Vec<Option<u32>>> {
    static CACHE: OnceLock<MapCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (kind, b, h, w, c);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Arc::clone(m);
    }
    let m = Arc::new(build());
    cache.lock().unwrap().insert(key, Arc::clone(&m));
    m
}

/// Row `(n, y, x)` of the output holds the 3×3 neighbourhood, tap-major.
pub(crate) fn im2col_map(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<Option<u32>>> {
    cached(MapKind::Im2Col, b, h, w, c, || {
        let mut map = Vec::with_capacity(b * h * w * 9 * c);
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            let inside = yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64;
                            for ch in 0..c {
                                map.push(inside.then(|| (((n * h + yy as usize) * w + xx as usize) * c + ch) as u32));
                            }
                        }
                    }
                }
            }
        }
        map
    })
}

/// `[b*h*w, c]` to `[b*(h/2)*(w/2), 4c]`.
pub(crate) fn space_to_depth_map(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<Option<u32>>> {
    cached(MapKind::SpaceToDepth, b, h, w, c, || {
        let (h2, w2) = (h / 2, w / 2);
        let mut map = Vec::with_capacity(b * h * w * c);
        for n in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ch in 0..c {
                                map.push(Some((((n * h + 2 * y + dy) * w + 2 * x + dx) * c + ch) as u32));
                            }
                        }
                    }
                }
            }
        }
        map
    })
}

/// `[b*h*w, 4c]` to `[b*(2h)*(2w), c]`; inverse of [`space_to_depth_map`].
pub(crate) fn depth_to_space_map(b: usize, h: usize, w: usize, c: usize) -> Arc<Vec<Option<u32>>> {
    cached(MapKind::DepthToSpace, b, h, w, c, || {
        let (h2, w2) = (2 * h, 2 * w);
        let mut map = Vec::with_capacity(b * h2 * w2 * c);
        for n in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    let (sy, sx, dy, dx) = (y / 2, x / 2, y % 2, x % 2);
                    for ch in 0..c {
                        map.push(Some((((n * h + sy) * w + sx) * 4 * c + (dy * 2 + dx) * c + ch) as u32));
                    }
                }
            }
        }
        map
    })
}
