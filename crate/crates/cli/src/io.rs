//! File formats: the observation text format, model and posterior JSON,
//! and estimates CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! save followed by load reproduces every value bit for bit and repeated
//! runs of a command produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crowdagg::{
    FullCovModel, IndPosterior, IndependentNoiseModel, LatentNoiseModel, LatentPosteriorState,
    Observation, ObservationSet,
};

use crate::CliError;

/// A trained model of any family, as stored on disk. The JSON carries no
/// tag; the family is recognized by its distinctive keys and the text is
/// then parsed directly into the concrete type. Serde's untagged-enum
/// probing is avoided deliberately: its internal buffering can perturb
/// the last bit of a float, breaking exact round-trips.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(untagged)]
pub enum ModelFile {
    Latent(LatentNoiseModel),
    Full(FullCovModel),
    Independent(IndependentNoiseModel),
}

/// A stored posterior, either family, recognized like [`ModelFile`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(untagged)]
pub enum PosteriorFile {
    Latent(LatentPosteriorState),
    Independent(IndPosterior),
}

fn json_keys(path: &Path, text: &str) -> Result<Vec<String>, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| io_err(path, e))?;
    let obj = value
        .as_object()
        .ok_or_else(|| io_err(path, "expected a JSON object"))?;
    Ok(obj.keys().cloned().collect())
}

pub fn load_model(path: &Path) -> Result<ModelFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let keys = json_keys(path, &text)?;
    let has = |k: &str| keys.iter().any(|key| key == k);
    let parse = |e: serde_json::Error| io_err(path, e);
    if has("Sigma") {
        Ok(ModelFile::Full(serde_json::from_str(&text).map_err(parse)?))
    } else if has("V") {
        Ok(ModelFile::Latent(serde_json::from_str(&text).map_err(parse)?))
    } else if has("worker_variances") {
        Ok(ModelFile::Independent(serde_json::from_str(&text).map_err(parse)?))
    } else {
        Err(io_err(path, "not a recognizable model file"))
    }
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let keys = json_keys(path, &text)?;
    let has = |k: &str| keys.iter().any(|key| key == k);
    let parse = |e: serde_json::Error| io_err(path, e);
    if has("v_mean") {
        Ok(PosteriorFile::Latent(serde_json::from_str(&text).map_err(parse)?))
    } else if has("mean") {
        Ok(PosteriorFile::Independent(serde_json::from_str(&text).map_err(parse)?))
    } else {
        Err(io_err(path, "not a recognizable posterior file"))
    }
}

fn io_err(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {err}", path.display()))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}:{line}: {msg}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Writes the observation text format: a dimensions comment, the header
/// `task,worker,value`, one row per entry, and a `# truth` section when
/// any truth is recorded. The dimensions line preserves tasks and
/// workers that have no observations.
pub fn save_observations(path: &Path, data: &ObservationSet) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "# tasks={} workers={}", data.num_tasks(), data.num_workers());
    out.push_str("task,worker,value\n");
    for e in data.entries() {
        let _ = writeln!(out, "{},{},{}", e.task, e.worker, e.value);
    }
    let truths: Vec<(usize, f64)> =
        (0..data.num_tasks()).filter_map(|i| data.truth(i).map(|t| (i, t))).collect();
    if !truths.is_empty() {
        out.push_str("# truth\n");
        for (task, value) in truths {
            let _ = writeln!(out, "{task},{value}");
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads the observation text format. The dimensions comment is
/// optional; without it the counts are inferred as one past the largest
/// index seen.
pub fn load_observations(path: &Path) -> Result<ObservationSet, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut dims: Option<(usize, usize)> = None;
    let mut entries = Vec::new();
    let mut truth = BTreeMap::new();
    let mut saw_header = false;
    let mut in_truth = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if rest == "truth" {
                if !saw_header {
                    return Err(parse_err(path, lineno, "truth section before the header"));
                }
                in_truth = true;
            } else if rest.starts_with("tasks=") {
                if saw_header {
                    return Err(parse_err(path, lineno, "dimensions line after the header"));
                }
                dims = Some(parse_dims(path, lineno, rest)?);
            }
            // Other comment lines are ignored.
            continue;
        }
        if !saw_header {
            if line != "task,worker,value" {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected header `task,worker,value`, found `{line}`"),
                ));
            }
            saw_header = true;
            continue;
        }
        if in_truth {
            let (task, value) = parse_truth_row(path, lineno, line)?;
            if truth.insert(task, value).is_some() {
                return Err(parse_err(path, lineno, format!("duplicate truth for task {task}")));
            }
        } else {
            entries.push(parse_entry_row(path, lineno, line)?);
        }
    }
    if !saw_header {
        return Err(io_err(path, "missing header `task,worker,value`"));
    }
    let (num_tasks, num_workers) = dims.unwrap_or_else(|| {
        let tasks = entries
            .iter()
            .map(|e: &Observation| e.task + 1)
            .chain(truth.keys().map(|&t| t + 1))
            .max()
            .unwrap_or(0);
        let workers = entries.iter().map(|e| e.worker + 1).max().unwrap_or(0);
        (tasks, workers)
    });
    ObservationSet::with_truth(num_tasks, num_workers, entries, truth)
        .map_err(|e| io_err(path, e))
}

fn parse_dims(path: &Path, lineno: usize, rest: &str) -> Result<(usize, usize), CliError> {
    let mut tasks = None;
    let mut workers = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("tasks=") {
            tasks = v.parse::<usize>().ok();
        } else if let Some(v) = field.strip_prefix("workers=") {
            workers = v.parse::<usize>().ok();
        }
    }
    match (tasks, workers) {
        (Some(t), Some(w)) => Ok((t, w)),
        _ => Err(parse_err(path, lineno, "malformed dimensions line")),
    }
}

fn parse_entry_row(path: &Path, lineno: usize, line: &str) -> Result<Observation, CliError> {
    let mut fields = line.split(',');
    let (Some(task), Some(worker), Some(value), None) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(parse_err(path, lineno, "expected `task,worker,value`"));
    };
    Ok(Observation {
        task: task
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad task index `{task}`")))?,
        worker: worker
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad worker index `{worker}`")))?,
        value: value
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad value `{value}`")))?,
    })
}

fn parse_truth_row(path: &Path, lineno: usize, line: &str) -> Result<(usize, f64), CliError> {
    let mut fields = line.split(',');
    let (Some(task), Some(value), None) = (fields.next(), fields.next(), fields.next()) else {
        return Err(parse_err(path, lineno, "expected `task,value`"));
    };
    Ok((
        task.trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad task index `{task}`")))?,
        value
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad value `{value}`")))?,
    ))
}

/// Writes estimates CSV. Rows are `(task, estimate, posterior variance)`;
/// the variance column appears only when every row carries one.
pub fn save_estimates(path: &Path, rows: &[(usize, f64, Option<f64>)]) -> Result<(), CliError> {
    let with_var = rows.iter().all(|(_, _, v)| v.is_some()) && !rows.is_empty();
    let mut out = String::new();
    out.push_str(if with_var { "task,estimate,posterior_var\n" } else { "task,estimate\n" });
    for &(task, estimate, var) in rows {
        match (with_var, var) {
            (true, Some(v)) => {
                let _ = writeln!(out, "{task},{estimate},{v}");
            }
            _ => {
                let _ = writeln!(out, "{task},{estimate}");
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads estimates CSV written by [`save_estimates`].
pub fn read_estimates(path: &Path) -> Result<Vec<(usize, f64, Option<f64>)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let with_var = match lines.next() {
        Some((_, "task,estimate")) => false,
        Some((_, "task,estimate,posterior_var")) => true,
        Some((_, other)) => {
            return Err(parse_err(path, 1, format!("unexpected header `{other}`")))
        }
        None => return Err(io_err(path, "empty estimates file")),
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if with_var { 3 } else { 2 };
        if fields.len() != expected {
            return Err(parse_err(path, lineno, format!("expected {expected} fields")));
        }
        let task = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad task index `{}`", fields[0])))?;
        let estimate = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad estimate `{}`", fields[1])))?;
        let var = if with_var {
            Some(fields[2].parse().map_err(|_| {
                parse_err(path, lineno, format!("bad variance `{}`", fields[2]))
            })?)
        } else {
            None
        };
        rows.push((task, estimate, var));
    }
    Ok(rows)
}
