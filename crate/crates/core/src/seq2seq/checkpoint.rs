use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{ModelHyper, ModelParams};
use crate::error::{Error, Result};
use crate::numkernel::{AdamState, Matrix};

pub const CHECKPOINT_HEADER: &str = "FACEFORGE-CKPT v1";

/// Model parameters plus, optionally, the optimizer state.
///
/// Layout: the header line, then records of `name rows cols\n` followed by
/// `rows * cols` little-endian f64 values. Record order is `hyper`, every
/// parameter, then `adam.config`, `adam.m.<name>` and `adam.v.<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

fn write_record(out: &mut impl Write, name: &str, m: &Matrix) -> Result<()> {
    writeln!(out, "{name} {} {}", m.rows(), m.cols())?;
    for x in m.data() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_record(input: &mut impl BufRead) -> Result<Option<(String, Matrix)>> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let fields: Vec<&str> = line.trim_end_matches('\n').split(' ').collect();
    let bad = || Error::Checkpoint(format!("malformed record header {line:?}"));
    if fields.len() != 3 {
        return Err(bad());
    }
    let rows: usize = fields[1].parse().map_err(|_| bad())?;
    let cols: usize = fields[2].parse().map_err(|_| bad())?;
    let len = rows.checked_mul(cols).ok_or_else(bad)?;
    let mut bytes = vec![0u8; len.checked_mul(8).ok_or_else(bad)?];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint(format!("truncated record {}", fields[0])))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some((fields[0].to_string(), Matrix::from_vec(rows, cols, data)?)))
}

impl Checkpoint {
    pub fn new(params: ModelParams, adam: Option<AdamState>) -> Self {
        Checkpoint { params, adam }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        let h = self.params.hyper();
        let hyper = Matrix::row_vector(vec![h.vocab as f64, h.embed as f64, h.hidden as f64, h.layers as f64]);
        write_record(&mut out, "hyper", &hyper)?;
        for (name, m) in self.params.names().iter().zip(self.params.tensors()) {
            write_record(&mut out, name, m)?;
        }
        if let Some(adam) = &self.adam {
            let config = Matrix::row_vector(vec![adam.step as f64, adam.alpha, adam.beta1, adam.beta2, adam.eps]);
            write_record(&mut out, "adam.config", &config)?;
            for (name, m) in self.params.names().iter().zip(&adam.m) {
                write_record(&mut out, &format!("adam.m.{name}"), m)?;
            }
            for (name, v) in self.params.names().iter().zip(&adam.v) {
                write_record(&mut out, &format!("adam.v.{name}"), v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = BufReader::new(bytes);
        let mut header = String::new();
        input.read_line(&mut header)?;
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint(format!("unknown header {:?}", header.trim_end())));
        }
        let mut records = Vec::new();
        while let Some(record) = read_record(&mut input)? {
            records.push(record);
        }
        let mut it = records.into_iter();
        let (name, hyper) = it
            .next()
            .ok_or_else(|| Error::Checkpoint("missing hyper record".into()))?;
        if name != "hyper" || hyper.shape() != (1, 4) {
            return Err(Error::Checkpoint("first record must be hyper (1x4)".into()));
        }
        let as_size = |x: f64| {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e12 {
                Ok(x as usize)
            } else {
                Err(Error::Checkpoint(format!("bad model size {x}")))
            }
        };
        let d = hyper.data();
        let hyper = ModelHyper {
            vocab: as_size(d[0])?,
            embed: as_size(d[1])?,
            hidden: as_size(d[2])?,
            layers: as_size(d[3])?,
        };
        let rest: Vec<(String, Matrix)> = it.collect();
        let n_params = hyper.shapes().len();
        if rest.len() < n_params {
            return Err(Error::Checkpoint("missing parameter records".into()));
        }
        let mut rest = rest.into_iter();
        let named: Vec<(String, Matrix)> = rest.by_ref().take(n_params).collect();
        let params = ModelParams::from_named(hyper, named)?;
        let opt: Vec<(String, Matrix)> = rest.collect();
        let adam = if opt.is_empty() {
            None
        } else {
            Some(read_adam(&params, opt)?)
        };
        Ok(Checkpoint { params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_adam(params: &ModelParams, records: Vec<(String, Matrix)>) -> Result<AdamState> {
    let n = params.names().len();
    if records.len() != 1 + 2 * n {
        return Err(Error::Checkpoint(format!(
            "expected {} optimizer records, found {}",
            1 + 2 * n,
            records.len()
        )));
    }
    let mut it = records.into_iter();
    let (name, config) = it.next().expect("non-empty");
    if name != "adam.config" || config.shape() != (1, 5) {
        return Err(Error::Checkpoint("optimizer records must start with adam.config (1x5)".into()));
    }
    let c = config.data();
    if c[0] < 0.0 || c[0].fract() != 0.0 {
        return Err(Error::Checkpoint(format!("bad optimizer step {}", c[0])));
    }
    let mut adam = AdamState::new(params.tensors());
    adam.step = c[0] as u64;
    adam.alpha = c[1];
    adam.beta1 = c[2];
    adam.beta2 = c[3];
    adam.eps = c[4];
    for (prefix, slots) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
        for ((slot, pname), (name, m)) in slots.iter_mut().zip(params.names()).zip(it.by_ref().take(n)) {
            if name != format!("{prefix}{pname}") || !m.same_shape(slot) {
                return Err(Error::Checkpoint(format!("unexpected optimizer record {name}")));
            }
            *slot = m;
        }
    }
    Ok(adam)
}
