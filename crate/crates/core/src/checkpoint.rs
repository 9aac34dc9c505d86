//! Versioned text checkpoints (`.mfckpt`).
//!
//! Line-oriented, diffable, and byte-identical across save/load/save: every
//! value is written as its shortest round-trip decimal string. Layout:
//!
//! ```text
//! mfckpt 1
//! kind bundle|params|vector
//! scalar f64
//! suite <suite id>
//! fingerprint <hex of θ₀>        (bundle)
//! origin <hex>                   (vector; optional for params)
//! tasks <N>                      (bundle)
//! tensor <name> <dim> <dim> ...
//! <space-separated values, one line>
//! head <task> <classes>          (bundle, before its two tensors)
//! ...
//! end
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ExpertBundle, ParamSet, TaskHead, TaskVector};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mfckpt";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "mfckpt";

#[derive(Clone, Debug)]
pub enum Checkpoint<T: Scalar = f64> {
    Bundle(ExpertBundle<T>),
    Params {
        params: ParamSet<T>,
        suite_id: String,
        origin: Option<u64>,
    },
    Vector {
        vector: TaskVector<T>,
        suite_id: String,
    },
}

impl<T: Scalar> Checkpoint<T> {
    pub fn suite_id(&self) -> &str {
        match self {
            Checkpoint::Bundle(b) => &b.suite_id,
            Checkpoint::Params { suite_id, .. } => suite_id,
            Checkpoint::Vector { suite_id, .. } => suite_id,
        }
    }

    pub fn into_bundle(self) -> Result<ExpertBundle<T>> {
        match self {
            Checkpoint::Bundle(b) => Ok(b),
            _ => Err(Error::Format("checkpoint does not hold a bundle".into())),
        }
    }

    pub fn into_params(self) -> Result<(ParamSet<T>, Option<u64>)> {
        match self {
            Checkpoint::Params { params, origin, .. } => Ok((params, origin)),
            _ => Err(Error::Format(
                "checkpoint does not hold a parameter set".into(),
            )),
        }
    }
}

fn write_tensor<T: Scalar>(out: &mut String, name: &str, t: &Tensor<T>) {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
    let vals: Vec<String> = t.data().iter().map(|v| v.encode()).collect();
    let _ = writeln!(out, "{}", vals.join(" "));
}

fn write_paramset<T: Scalar>(out: &mut String, prefix: &str, p: &ParamSet<T>) {
    for (name, t) in p.iter() {
        write_tensor(out, &format!("{prefix}{name}"), t);
    }
}

pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT} {FORMAT_VERSION}");
    match ckpt {
        Checkpoint::Bundle(b) => {
            let _ = writeln!(out, "kind bundle");
            let _ = writeln!(out, "scalar {}", T::NAME);
            let _ = writeln!(out, "suite {}", b.suite_id);
            let _ = writeln!(out, "fingerprint {:016x}", b.theta0.fingerprint());
            let _ = writeln!(out, "tasks {}", b.tasks());
            write_paramset(&mut out, "theta0:", &b.theta0);
            for (i, head) in b.heads.iter().enumerate() {
                let _ = writeln!(out, "head {} {}", head.task, head.classes());
                write_tensor(&mut out, &format!("head{i}:weight"), &head.weight);
                write_tensor(&mut out, &format!("head{i}:bias"), &head.bias);
            }
            for (i, v) in b.vectors.iter().enumerate() {
                write_paramset(&mut out, &format!("vector{i}:"), v.delta());
            }
        }
        Checkpoint::Params {
            params,
            suite_id,
            origin,
        } => {
            let _ = writeln!(out, "kind params");
            let _ = writeln!(out, "scalar {}", T::NAME);
            let _ = writeln!(out, "suite {suite_id}");
            if let Some(fp) = origin {
                let _ = writeln!(out, "origin {fp:016x}");
            }
            write_paramset(&mut out, "", params);
        }
        Checkpoint::Vector { vector, suite_id } => {
            let _ = writeln!(out, "kind vector");
            let _ = writeln!(out, "scalar {}", T::NAME);
            let _ = writeln!(out, "suite {suite_id}");
            let _ = writeln!(out, "origin {:016x}", vector.origin());
            write_paramset(&mut out, "", vector.delta());
        }
    }
    out.push_str("end\n");
    out
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.no += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::Format(format!("truncated file at line {}", self.no)))
    }
}

fn parse_tensor_header(line: &str) -> Result<(String, Vec<usize>)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("tensor") {
        return Err(Error::Format(format!(
            "expected tensor record, got '{line}'"
        )));
    }
    let name = parts
        .next()
        .ok_or_else(|| Error::Format("tensor record without a name".into()))?
        .to_string();
    let mut dims = Vec::new();
    for p in parts {
        dims.push(
            p.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dimension '{p}'")))?,
        );
    }
    if dims.is_empty() {
        return Err(Error::Format(format!("tensor '{name}' has no shape")));
    }
    Ok((name, dims))
}

fn parse_values<T: Scalar>(line: &str, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(shape.iter().product());
    for tok in line.split_whitespace() {
        data.push(
            T::decode(tok).ok_or_else(|| {
                Error::Format(format!("tensor '{name}': unparseable value '{tok}'"))
            })?,
        );
    }
    Tensor::new(shape, data)
        .map_err(|e| Error::Format(format!("tensor '{name}' fails validation: {e}")))
}

pub fn decode<T: Scalar>(text: &str) -> Result<Checkpoint<T>> {
    let mut lines = Lines {
        inner: text.lines(),
        no: 0,
    };
    let header = lines.next()?;
    match header.split_once(' ') {
        Some((FORMAT, v)) => {
            let version: u32 = v
                .parse()
                .map_err(|_| Error::Format(format!("bad version '{v}'")))?;
            if version != FORMAT_VERSION {
                return Err(Error::Format(format!(
                    "unknown format version {version} (this build reads {FORMAT_VERSION})"
                )));
            }
        }
        _ => return Err(Error::Format(format!("not a {FORMAT} file"))),
    }

    let kind = lines
        .next()?
        .strip_prefix("kind ")
        .ok_or_else(|| Error::Format("missing kind record".into()))?
        .to_string();
    let scalar = lines
        .next()?
        .strip_prefix("scalar ")
        .ok_or_else(|| Error::Format("missing scalar record".into()))?;
    if scalar != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {scalar} values, reader expects {}",
            T::NAME
        )));
    }
    let suite_id = lines
        .next()?
        .strip_prefix("suite ")
        .ok_or_else(|| Error::Format("missing suite record".into()))?
        .to_string();

    match kind.as_str() {
        "bundle" => decode_bundle(&mut lines, suite_id),
        "params" => decode_params(&mut lines, suite_id),
        "vector" => decode_vector(&mut lines, suite_id),
        other => Err(Error::Format(format!("unknown checkpoint kind '{other}'"))),
    }
}

fn read_tensor<T: Scalar>(lines: &mut Lines, header: &str) -> Result<(String, Tensor<T>)> {
    let (name, shape) = parse_tensor_header(header)?;
    let values = lines.next()?;
    let t = parse_values(values, shape, &name)?;
    Ok((name, t))
}

fn decode_bundle<T: Scalar>(lines: &mut Lines, suite_id: String) -> Result<Checkpoint<T>> {
    let fp_line = lines.next()?;
    let fp = fp_line
        .strip_prefix("fingerprint ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Format(format!("bad fingerprint record '{fp_line}'")))?;
    let tasks_line = lines.next()?;
    let tasks: usize = tasks_line
        .strip_prefix("tasks ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad tasks record '{tasks_line}'")))?;

    let mut theta0 = ParamSet::new();
    let mut heads: Vec<TaskHead<T>> = Vec::new();
    let mut vector_maps: BTreeMap<usize, ParamSet<T>> = BTreeMap::new();

    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("head ") {
            let mut it = rest.split_whitespace();
            let task: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("bad head record".into()))?;
            let classes: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("bad head record".into()))?;
            let wheader = lines.next()?;
            let (wname, weight) = read_tensor::<T>(lines, wheader)?;
            let bheader = lines.next()?;
            let (bname, bias) = read_tensor::<T>(lines, bheader)?;
            if !wname.ends_with(":weight") || !bname.ends_with(":bias") {
                return Err(Error::Format("head tensors out of order".into()));
            }
            let head = TaskHead::new(task, weight, bias)
                .map_err(|e| Error::Format(format!("head {task}: {e}")))?;
            if head.classes() != classes {
                return Err(Error::Format(format!(
                    "head {task} declares {classes} classes but weight has {}",
                    head.classes()
                )));
            }
            heads.push(head);
            continue;
        }
        let (name, t) = read_tensor::<T>(lines, line)?;
        if let Some(rest) = name.strip_prefix("theta0:") {
            theta0.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("vector") {
            let (idx, pname) = rest
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("bad vector tensor '{name}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Format(format!("bad vector index in '{name}'")))?;
            vector_maps.entry(idx).or_default().insert(pname, t);
        } else {
            return Err(Error::Format(format!("unexpected tensor '{name}'")));
        }
    }

    let actual_fp = theta0.fingerprint();
    if actual_fp != fp {
        return Err(Error::Format(format!(
            "θ₀ fingerprint {actual_fp:016x} does not match stored {fp:016x}"
        )));
    }
    if vector_maps.len() != tasks || heads.len() != tasks {
        return Err(Error::Format(format!(
            "bundle declares {tasks} tasks but holds {} vectors / {} heads",
            vector_maps.len(),
            heads.len()
        )));
    }
    let vectors = vector_maps
        .into_values()
        .map(|delta| TaskVector::new(delta, fp))
        .collect();
    let bundle = ExpertBundle::new(theta0, vectors, heads, suite_id)
        .map_err(|e| Error::Format(format!("bundle fails validation: {e}")))?;
    Ok(Checkpoint::Bundle(bundle))
}

fn decode_params<T: Scalar>(lines: &mut Lines, suite_id: String) -> Result<Checkpoint<T>> {
    let mut params = ParamSet::new();
    let mut origin = None;
    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        if let Some(h) = line.strip_prefix("origin ") {
            origin = Some(
                u64::from_str_radix(h, 16)
                    .map_err(|_| Error::Format(format!("bad origin '{h}'")))?,
            );
            continue;
        }
        let (name, t) = read_tensor::<T>(lines, line)?;
        params.insert(&name, t);
    }
    Ok(Checkpoint::Params {
        params,
        suite_id,
        origin,
    })
}

fn decode_vector<T: Scalar>(lines: &mut Lines, suite_id: String) -> Result<Checkpoint<T>> {
    let origin_line = lines.next()?;
    let origin = origin_line
        .strip_prefix("origin ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::Format(format!("bad origin record '{origin_line}'")))?;
    let mut delta = ParamSet::new();
    loop {
        let line = lines.next()?;
        if line == "end" {
            break;
        }
        let (name, t) = read_tensor::<T>(lines, line)?;
        delta.insert(&name, t);
    }
    Ok(Checkpoint::Vector {
        vector: TaskVector::new(delta, origin),
        suite_id,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = std::fs::read_to_string(path)?;
    decode(&text)
}
