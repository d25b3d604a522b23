//! Residual networks anchored at the origin:
//! `K(x) = g(x) - g(0) + W2_L x` with `g = f_L o ... o f_1`,
//! `f_i(z) = softplus(W1_i z + b_i) + W2_i z` for hidden layers and
//! `f_L(z) = W1_L z + b_L`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const ACTIVATION: &str = "softplus";

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Vec<usize>,
    layers: Vec<Layer>,
}

/// Hidden states of one forward pass of `g`.
struct Tape {
    inputs: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: &[usize]) -> Result<Self> {
        if arch.len() < 3 {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("at least 2 layers required, got arch of length {}", arch.len()),
            });
        }
        if arch[0] != arch[arch.len() - 1] {
            return Err(Error::Shape {
                layer: arch.len() - 1,
                detail: format!("output width {} differs from input width {}", arch[arch.len() - 1], arch[0]),
            });
        }
        if let Some(i) = arch.iter().position(|&w| w == 0) {
            return Err(Error::Shape {
                layer: i,
                detail: "zero width".into(),
            });
        }
        let depth = arch.len() - 1;
        let layers = (1..=depth)
            .map(|i| Layer {
                w1: DMatrix::zeros(arch[i], arch[i - 1]),
                w2: if i < depth {
                    DMatrix::zeros(arch[i], arch[i - 1])
                } else {
                    DMatrix::zeros(arch[i], arch[0])
                },
                b: DVector::zeros(arch[i]),
            })
            .collect();
        Ok(Self {
            arch: arch.to_vec(),
            layers,
        })
    }

    /// Gaussian entries with standard deviation `std`; the outer skip weight is zero.
    pub fn random<R: Rng>(arch: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut flat = p.to_flat();
        for v in flat.iter_mut() {
            *v = normal.sample(rng);
        }
        p.set_flat(&flat)?;
        p.layers.last_mut().expect("depth >= 2").w2.fill(0.0);
        Ok(p)
    }

    /// Parameters realizing `K(x) = -lambda x`.
    pub fn scaled_identity(arch: &[usize], lambda: f64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let n = arch[0];
        p.layers.last_mut().expect("depth >= 2").w2 = DMatrix::identity(n, n) * -lambda;
        Ok(p)
    }

    pub fn from_layers(arch: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if layers.len() != p.layers.len() {
            return Err(Error::Shape {
                layer: layers.len(),
                detail: format!("expected {} layers", p.layers.len()),
            });
        }
        for (i, (given, want)) in layers.iter().zip(&p.layers).enumerate() {
            for (name, g, w) in [
                ("W1", given.w1.shape(), want.w1.shape()),
                ("W2", given.w2.shape(), want.w2.shape()),
                ("b", given.b.shape(), want.b.shape()),
            ] {
                if g != w {
                    return Err(Error::Shape {
                        layer: i + 1,
                        detail: format!("{name} has shape {g:?}, expected {w:?}"),
                    });
                }
            }
        }
        p.layers = layers;
        p.check_finite()?;
        Ok(p)
    }

    fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.w1.iter().chain(l.w2.iter()).chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Shape {
                    layer: i + 1,
                    detail: "non-finite entry".into(),
                });
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w1.len() + l.w2.len() + l.b.len())
            .sum()
    }

    /// Flat parameter vector: per layer `W1` (row-major), `W2` (row-major), `b`.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            push_row_major(&l.w1, &mut out);
            push_row_major(&l.w2, &mut out);
            out.extend(l.b.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("flat vector has {} entries, expected {}", flat.len(), self.param_count()),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            pos = read_row_major(&mut l.w1, flat, pos);
            pos = read_row_major(&mut l.w2, flat, pos);
            for v in l.b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &DVector<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                layer: 1,
                detail: format!("input has {} entries, expected {}", x.len(), self.input_dim()),
            });
        }
        Ok(())
    }

    fn tape(&self, x: &DVector<f64>) -> Tape {
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth - 1);
        let mut z = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let s = &l.w1 * &z + &l.b;
            inputs.push(z.clone());
            if i + 1 < depth {
                z = s.map(softplus) + &l.w2 * &z;
                pre.push(s);
            } else {
                z = s;
            }
        }
        Tape {
            inputs,
            pre,
            output: z,
        }
    }

    /// Realization `K(x)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let zero = DVector::zeros(x.len());
        let skip = &self.layers[self.depth() - 1].w2;
        Ok(self.tape(x).output - self.tape(&zero).output + skip * x)
    }

    /// `dK/dx` at `x`.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let tape = self.tape(x);
        let depth = self.depth();
        let mut jac = DMatrix::identity(x.len(), x.len());
        for (i, l) in self.layers.iter().enumerate() {
            if i + 1 < depth {
                let sig = tape.pre[i].map(sigmoid);
                let mut local = l.w1.clone();
                for (r, s) in sig.iter().enumerate() {
                    local.row_mut(r).scale_mut(*s);
                }
                local += &l.w2;
                jac = local * jac;
            } else {
                jac = &l.w1 * jac;
            }
        }
        Ok(jac + &self.layers[depth - 1].w2)
    }

    /// Accumulates `scale * (dg/dtheta)^T v` at the recorded point into `grad`.
    fn backward(&self, tape: &Tape, v: &DVector<f64>, scale: f64, grad: &mut [Layer]) {
        let depth = self.depth();
        let mut zbar = v.clone();
        for i in (0..depth).rev() {
            let l = &self.layers[i];
            let z_in = &tape.inputs[i];
            if i + 1 == depth {
                grad[i].w1.ger(scale, &zbar, z_in, 1.0);
                grad[i].b.axpy(scale, &zbar, 1.0);
                zbar = l.w1.tr_mul(&zbar);
            } else {
                let sbar = zbar.component_mul(&tape.pre[i].map(sigmoid));
                grad[i].w1.ger(scale, &sbar, z_in, 1.0);
                grad[i].b.axpy(scale, &sbar, 1.0);
                grad[i].w2.ger(scale, &zbar, z_in, 1.0);
                zbar = l.w1.tr_mul(&sbar) + l.w2.tr_mul(&zbar);
            }
        }
    }

    /// Flat `(dK/dtheta)(x)^T v`.
    pub fn param_vjp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        self.check_input(v)?;
        let mut grad = Self::zeros(&self.arch)?.layers;
        let zero = DVector::zeros(x.len());
        self.backward(&self.tape(x), v, 1.0, &mut grad);
        self.backward(&self.tape(&zero), v, -1.0, &mut grad);
        grad[self.depth() - 1].w2.ger(1.0, v, x, 1.0);
        Ok(NetworkParams {
            arch: self.arch.clone(),
            layers: grad,
        }
        .to_flat())
    }

    /// Self-describing text record; floats carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layers {}", self.depth());
        let arch: Vec<String> = self.arch.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "arch {}", arch.join(" "));
        let _ = writeln!(s, "activation {ACTIVATION}");
        for (i, l) in self.layers.iter().enumerate() {
            write_matrix(&mut s, &format!("W1 {}", i + 1), &l.w1);
            write_matrix(&mut s, &format!("W2 {}", i + 1), &l.w2);
            let _ = writeln!(s, "b {} {}", i + 1, l.b.len());
            let row: Vec<String> = l.b.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of input, expected {what}"),
            })
        };
        let (ln, header) = next("layers")?;
        let depth: usize = field(header, "layers", ln)?
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(ln, "bad layer count"))?;
        let (ln, arch_line) = next("arch")?;
        let arch: Vec<usize> = field(arch_line, "arch", ln)?
            .iter()
            .map(|v| v.parse().map_err(|_| parse_err(ln, "bad arch entry")))
            .collect::<Result<_>>()?;
        if arch.len() != depth + 1 {
            return Err(parse_err(ln, "arch length does not match layer count"));
        }
        let (ln, act) = next("activation")?;
        let act = field(act, "activation", ln)?;
        if act != [ACTIVATION] {
            return Err(parse_err(ln, &format!("unsupported activation {act:?}")));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 1..=depth {
            let w1 = read_matrix(&mut next, &format!("W1 {i}"))?;
            let w2 = read_matrix(&mut next, &format!("W2 {i}"))?;
            let (ln, bh) = next("bias header")?;
            let dims = field(bh, "b", ln)?;
            if dims.len() != 2 || dims[0] != i.to_string() {
                return Err(parse_err(ln, "bad bias header"));
            }
            let len: usize = dims[1].parse().map_err(|_| parse_err(ln, "bad bias length"))?;
            let (ln, row) = next("bias values")?;
            let vals = parse_floats(row, ln)?;
            if vals.len() != len {
                return Err(parse_err(ln, "bias length mismatch"));
            }
            layers.push(Layer {
                w1,
                w2,
                b: DVector::from_vec(vals),
            });
        }
        Self::from_layers(&arch, layers)
    }
}

fn push_row_major(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

fn read_row_major(m: &mut DMatrix<f64>, flat: &DVector<f64>, mut pos: usize) -> usize {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = flat[pos];
            pos += 1;
        }
    }
    pos
}

fn write_matrix(s: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(s, "{name} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

fn field<'a>(line: &'a str, key: &str, ln: usize) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(parse_err(ln, &format!("expected `{key}`")));
    }
    Ok(parts.collect())
}

fn parse_floats(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| parse_err(ln, &format!("bad number `{v}`"))))
        .collect()
}

fn read_matrix<'a, F>(next: &mut F, name: &str) -> Result<DMatrix<f64>>
where
    F: FnMut(&str) -> Result<(usize, &'a str)>,
{
    let (ln, header) = next(name)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let want: Vec<&str> = name.split_whitespace().collect();
    if parts.len() != 4 || parts[..2] != want[..] {
        return Err(parse_err(ln, &format!("expected `{name} rows cols`")));
    }
    let rows: usize = parts[2].parse().map_err(|_| parse_err(ln, "bad row count"))?;
    let cols: usize = parts[3].parse().map_err(|_| parse_err(ln, "bad column count"))?;
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let (ln, row) = next("matrix row")?;
        let vals = parse_floats(row, ln)?;
        if vals.len() != cols {
            return Err(parse_err(ln, "row length mismatch"));
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ARCH: [usize; 4] = [3, 5, 4, 3];

    #[test]
    fn zero_parameters_give_zero_map() {
        let p = NetworkParams::zeros(&ARCH).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_eq!(p.forward(&x).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn scaled_identity_is_linear() {
        let p = NetworkParams::scaled_identity(&ARCH, 7.0).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert!((p.forward(&x).unwrap() + &x * 7.0).amax() < 1e-12);
        let j = p.input_jacobian(&x).unwrap();
        assert!((j + DMatrix::identity(3, 3) * 7.0).amax() < 1e-12);
    }

    #[test]
    fn anchored_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NetworkParams::random(&ARCH, 1.0, &mut rng).unwrap();
        assert!(p.forward(&DVector::zeros(3)).unwrap().amax() <= 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut layers = NetworkParams::zeros(&ARCH).unwrap().layers().to_vec();
        layers[1].w2 = DMatrix::zeros(2, 2);
        match NetworkParams::from_layers(&ARCH, layers) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(NetworkParams::zeros(&[3, 4]).is_err());
        assert!(NetworkParams::zeros(&[3, 4, 2]).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NetworkParams::random(&ARCH, 0.7, &mut rng).unwrap();
        let q = NetworkParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn text_errors_report_lines() {
        let p = NetworkParams::zeros(&ARCH).unwrap();
        let text = p.to_text().replace("activation softplus", "activation relu");
        match NetworkParams::from_text(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
