//! Binary model container.
//!
//! A plain-text header followed by a payload of little-endian `f64` values:
//!
//! ```text
//! DETRAME-MODEL 1
//! input 2
//! layer 0 dense 2 16
//! act 0 qmetric 16 3
//! layer 1 conv 8 3 3 3 1 1          # out_ch in_ch kh kw stride padding
//! act 1 relu
//! reshape 1 8,4,4 128
//! head 16 2
//! array layers.0.weight 16,2 0      # name, shape, byte offset into payload
//! array layers.0.offset 16 256
//! ...
//! end
//! <payload bytes>
//! ```
//!
//! Arrays are stored in row-major order. Extra arrays (for example feature
//! normalization statistics) may follow the model parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::metric::{AffineTransform, RnnCell};

use super::activation::Activation;
use super::linear::{Conv2D, LinearOp};
use super::model::{Layer, Model};
use super::reshape::ReshapeOp;

const MAGIC: &str = "DETRAME-MODEL 1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub extras: Vec<(String, ArrayD<f64>)>,
}

impl ModelFile {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            extras: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_model(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_model(BufReader::new(File::open(path)?))
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::ModelFormat(format!("bad dimension list {s:?}")))
        })
        .collect()
}

pub fn write_model<W: Write>(w: &mut W, file: &ModelFile) -> Result<()> {
    let model = &file.model;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "input {}", dims(model.input_shape()))?;
    for (i, layer) in model.layers().iter().enumerate() {
        match &layer.linear {
            LinearOp::Dense(t) => writeln!(w, "layer {i} dense {} {}", t.in_dim(), t.out_dim())?,
            LinearOp::Conv2D(c) => {
                let (kh, kw) = c.kernel_size();
                writeln!(
                    w,
                    "layer {i} conv {} {} {kh} {kw} {} {}",
                    c.out_channels(),
                    c.in_channels(),
                    c.stride(),
                    c.padding()
                )?
            }
        }
        match &layer.activation {
            Activation::QMetric(cell) => writeln!(w, "act {i} qmetric {} {}", cell.dim(), cell.tt_max())?,
            Activation::PlainRelu => writeln!(w, "act {i} relu")?,
        }
        if let Some(r) = &layer.reshape {
            writeln!(w, "reshape {i} {} {}", dims(r.input_shape()), dims(r.output_shape()))?;
        }
    }
    writeln!(w, "head {} {}", model.head().in_dim(), model.class_count())?;

    let params = model.parameters();
    let arrays: Vec<(&str, ndarray::ArrayViewD<f64>)> = params
        .iter()
        .map(|(n, a)| (n.as_str(), a.view()))
        .chain(file.extras.iter().map(|(n, a)| (n.as_str(), a.view())))
        .collect();
    let mut offset = 0usize;
    for (name, a) in &arrays {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::ModelFormat(format!("invalid array name {name:?}")));
        }
        writeln!(w, "array {name} {} {offset}", dims(a.shape()))?;
        offset += a.len() * 8;
    }
    writeln!(w, "end")?;
    for (_, a) in &arrays {
        for v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

enum LinearSpec {
    Dense(usize, usize),
    Conv {
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Default)]
struct LayerSpec {
    linear: Option<LinearSpec>,
    act: Option<Option<usize>>,
    reshape: Option<(Vec<usize>, Vec<usize>)>,
}

fn num(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::ModelFormat(format!("missing or bad {what}")))
}

pub fn read_model<R: Read>(r: R) -> Result<ModelFile> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::ModelFormat("missing header magic".into()));
    }

    let mut input = None;
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut head = None;
    let mut arrays: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::ModelFormat("header not terminated by 'end'".into()));
        }
        let mut tok = line.split_whitespace();
        let Some(kind) = tok.next() else { continue };
        let layer_slot = |specs: &mut Vec<LayerSpec>, idx: usize| -> Result<usize> {
            if idx > specs.len() {
                return Err(Error::ModelFormat(format!("layer {idx} declared out of order")));
            }
            if idx == specs.len() {
                specs.push(LayerSpec::default());
            }
            Ok(idx)
        };
        match kind {
            "end" => break,
            "input" => input = Some(parse_dims(tok.next().unwrap_or(""))?),
            "layer" => {
                let i = layer_slot(&mut specs, num(tok.next(), "layer index")?)?;
                let spec = match tok.next() {
                    Some("dense") => LinearSpec::Dense(num(tok.next(), "in dim")?, num(tok.next(), "out dim")?),
                    Some("conv") => LinearSpec::Conv {
                        out_ch: num(tok.next(), "out channels")?,
                        in_ch: num(tok.next(), "in channels")?,
                        kh: num(tok.next(), "kernel height")?,
                        kw: num(tok.next(), "kernel width")?,
                        stride: num(tok.next(), "stride")?,
                        padding: num(tok.next(), "padding")?,
                    },
                    other => return Err(Error::ModelFormat(format!("unknown layer kind {other:?}"))),
                };
                specs[i].linear = Some(spec);
            }
            "act" => {
                let i = layer_slot(&mut specs, num(tok.next(), "layer index")?)?;
                specs[i].act = Some(match tok.next() {
                    Some("relu") => None,
                    Some("qmetric") => {
                        let _k = num(tok.next(), "cell dimension")?;
                        Some(num(tok.next(), "tt_max")?)
                    }
                    other => return Err(Error::ModelFormat(format!("unknown activation {other:?}"))),
                });
            }
            "reshape" => {
                let i = layer_slot(&mut specs, num(tok.next(), "layer index")?)?;
                let from = parse_dims(tok.next().unwrap_or(""))?;
                let to = parse_dims(tok.next().unwrap_or(""))?;
                specs[i].reshape = Some((from, to));
            }
            "head" => head = Some((num(tok.next(), "head in dim")?, num(tok.next(), "class count")?)),
            "array" => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::ModelFormat("array without name".into()))?
                    .to_string();
                let shape = parse_dims(tok.next().unwrap_or(""))?;
                let offset = num(tok.next(), "array offset")?;
                arrays.push((name, shape, offset));
            }
            other => return Err(Error::ModelFormat(format!("unknown header line {other:?}"))),
        }
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut named: Vec<(String, ArrayD<f64>)> = Vec::with_capacity(arrays.len());
    for (name, shape, offset) in arrays {
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if end > payload.len() {
            return Err(Error::ModelFormat(format!("array {name} runs past the payload")));
        }
        let values: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::ModelFormat(format!("array {name}: {e}")))?;
        named.push((name, a));
    }

    let mut take = |name: &str| -> Result<ArrayD<f64>> {
        let pos = named
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::ModelFormat(format!("missing array {name}")))?;
        Ok(named.remove(pos).1)
    };
    let to2 = |a: ArrayD<f64>, name: &str| -> Result<Array2<f64>> {
        a.into_dimensionality()
            .map_err(|_| Error::ModelFormat(format!("{name} must be a matrix")))
    };
    let to1 = |a: ArrayD<f64>, name: &str| -> Result<Array1<f64>> {
        a.into_dimensionality()
            .map_err(|_| Error::ModelFormat(format!("{name} must be a vector")))
    };

    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let linear = match spec.linear {
            Some(LinearSpec::Dense(din, dout)) => {
                let w = to2(take(&format!("layers.{i}.weight"))?, "weight")?;
                let c = to1(take(&format!("layers.{i}.offset"))?, "offset")?;
                if w.dim() != (dout, din) {
                    return Err(Error::ModelFormat(format!("layer {i} weight shape mismatch")));
                }
                LinearOp::Dense(AffineTransform::new(w, c)?)
            }
            Some(LinearSpec::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                padding,
            }) => {
                let k: Array4<f64> = take(&format!("layers.{i}.kernel"))?
                    .into_dimensionality()
                    .map_err(|_| Error::ModelFormat("kernel must have 4 axes".into()))?;
                if k.dim() != (out_ch, in_ch, kh, kw) {
                    return Err(Error::ModelFormat(format!("layer {i} kernel shape mismatch")));
                }
                let b = to1(take(&format!("layers.{i}.bias"))?, "bias")?;
                LinearOp::Conv2D(Conv2D::new(k, b, stride, padding)?)
            }
            None => return Err(Error::ModelFormat(format!("layer {i} has no linear part"))),
        };
        let activation = match spec.act {
            Some(None) => Activation::PlainRelu,
            Some(Some(tt_max)) => Activation::QMetric(RnnCell::new(
                to2(take(&format!("layers.{i}.coupling"))?, "coupling")?,
                to1(take(&format!("layers.{i}.gain"))?, "gain")?,
                to1(take(&format!("layers.{i}.threshold"))?, "threshold")?,
                tt_max,
            )?),
            None => return Err(Error::ModelFormat(format!("layer {i} has no activation"))),
        };
        let mut layer = Layer::new(linear, activation);
        if let Some((from, to)) = spec.reshape {
            layer = layer.with_reshape(ReshapeOp::new(from, to)?);
        }
        layers.push(layer);
    }
    let (head_in, classes) = head.ok_or_else(|| Error::ModelFormat("missing head line".into()))?;
    let hw = to2(take("head.weight")?, "head weight")?;
    let hc = to1(take("head.offset")?, "head offset")?;
    if hw.dim() != (classes, head_in) {
        return Err(Error::ModelFormat("head weight shape mismatch".into()));
    }
    let input = input.ok_or_else(|| Error::ModelFormat("missing input line".into()))?;
    let model = Model::new(input, layers, AffineTransform::new(hw, hc)?)?;
    Ok(ModelFile { model, extras: named })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{init_conv, ActivationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_mixed_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = init_conv(3, 1, (3, 3), 1, 1, &mut rng).unwrap();
        let l0 = Layer::new(LinearOp::Conv2D(conv), ActivationKind::QMetric.init(3, 2).unwrap())
            .with_reshape(ReshapeOp::flatten(vec![3, 4, 4]).unwrap());
        let l1 = Layer::new(
            LinearOp::Dense(crate::net::model::init_dense(48, 5, &mut rng)),
            Activation::PlainRelu,
        );
        let model = Model::new(
            vec![1, 4, 4],
            vec![l0, l1],
            crate::net::model::init_dense(5, 3, &mut rng),
        )
        .unwrap();
        let mut file = ModelFile::new(model);
        file.extras
            .push(("norm.mean".into(), ArrayD::from_elem(IxDyn(&[2]), 0.25)));

        let mut buf = Vec::new();
        write_model(&mut buf, &file).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::mlp(2, &[3], 2, ActivationKind::QMetric, 3, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &ModelFile::new(model)).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_model(buf.as_slice()), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_model(&b"NOT-A-MODEL\nend\n"[..]).is_err());
    }
}
