//! Generated datasets as tensor containers.
//!
//! Records, per non-empty split `s` with `N` samples (each row is one
//! sample, flattened row-major):
//!
//! * `s.visual [N, T*Dv]`, `s.audio [N, T*Da]`, `s.patches [N, T*M*Dv]`,
//!   `s.sentence [N, Dq]`, `s.words [N, 4*Dq]`
//! * `s.labels [N]`
//! * `s.queries [N, 4]`: family, modality (0 visual, 1 audio), first,
//!   second (-1 when unused)
//! * `s.events [N, K*5]`: modality, signature, start, len, patch per event,
//!   padded with -1 rows up to the longest list `K` (omitted when `K = 0`)
//!
//! plus `task`, the numeric task configuration. Metadata is always f64;
//! features use the precision chosen at write time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::RawInputs;
use crate::harness::ablation::Precision;
use crate::harness::task::{
    Modality, PlantedEvent, Query, QuestionFamily, SyntheticSample, TaskConfig, TaskData, QUESTION_TOKENS,
};
use crate::io::container::{read_container, write_container, NamedTensors, StoredTensor};
use crate::numerics::Tensor;

const SPLITS: [&str; 3] = ["train", "val", "test"];
const EVENT_FIELDS: usize = 5;

/// Accessor of one feature stream.
type Field = fn(&RawInputs<f64>) -> &Tensor<f64>;

fn task_vector(c: &TaskConfig) -> Vec<f64> {
    let counts = [
        c.segments,
        c.visual_dim,
        c.audio_dim,
        c.patches,
        c.classes,
        c.experts,
        c.heads,
        c.width,
        c.signatures,
        c.max_events,
        c.event_len,
        c.max_distractors,
        c.train_size,
        c.val_size,
        c.test_size,
    ];
    let mut v: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
    v.extend([c.noise, c.amplitude]);
    // a u64 does not fit in one f64, two u32 halves do
    v.extend([(c.seed >> 32) as f64, (c.seed & 0xffff_ffff) as f64]);
    v
}

fn task_from_vector(v: &[f64]) -> Result<TaskConfig> {
    if v.len() != 19 || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("task record has {} entries, expected 19", v.len())));
    }
    let n = |i: usize| -> Result<usize> {
        let x = v[i];
        if x < 0.0 || x.fract() != 0.0 {
            return Err(Error::Config(format!("task record entry {i} is not a count: {x}")));
        }
        Ok(x as usize)
    };
    Ok(TaskConfig {
        segments: n(0)?,
        visual_dim: n(1)?,
        audio_dim: n(2)?,
        patches: n(3)?,
        classes: n(4)?,
        experts: n(5)?,
        heads: n(6)?,
        width: n(7)?,
        signatures: n(8)?,
        max_events: n(9)?,
        event_len: n(10)?,
        max_distractors: n(11)?,
        train_size: n(12)?,
        val_size: n(13)?,
        test_size: n(14)?,
        noise: v[15],
        amplitude: v[16],
        seed: ((n(17)? as u64) << 32) | n(18)? as u64,
    })
}

fn stored(dims: &[usize], data: Vec<f64>, precision: Precision) -> Result<StoredTensor> {
    let t = Tensor::new(dims, data)?;
    Ok(match precision {
        Precision::F32 => StoredTensor::F32(t.cast()),
        Precision::F64 => StoredTensor::F64(t),
    })
}

fn modality_code(m: Modality) -> f64 {
    match m {
        Modality::Visual => 0.0,
        Modality::Audio => 1.0,
    }
}

fn split_records(name: &str, samples: &[SyntheticSample], precision: Precision) -> Result<NamedTensors> {
    let n = samples.len();
    let mut out = Vec::new();
    let features: [(&str, Field); 5] = [
        ("visual", |r| &r.visual),
        ("audio", |r| &r.audio),
        ("patches", |r| &r.patches),
        ("sentence", |r| &r.sentence),
        ("words", |r| &r.words),
    ];
    for (field, get) in features {
        let width = get(&samples[0].inputs).len();
        let mut data = Vec::with_capacity(n * width);
        for s in samples {
            let t = get(&s.inputs);
            if t.len() != width {
                return Err(Error::shape("write_dataset", format!("{name}.{field} sizes differ")));
            }
            data.extend_from_slice(t.data());
        }
        out.push((format!("{name}.{field}"), stored(&[n, width], data, precision)?));
    }
    let labels = samples.iter().map(|s| s.label as f64).collect();
    out.push((format!("{name}.labels"), stored(&[n], labels, Precision::F64)?));
    let queries = samples
        .iter()
        .flat_map(|s| {
            let q = &s.query;
            [
                q.family.index() as f64,
                modality_code(q.modality),
                q.first as f64,
                q.second.map_or(-1.0, |x| x as f64),
            ]
        })
        .collect();
    out.push((format!("{name}.queries"), stored(&[n, 4], queries, Precision::F64)?));
    let k = samples.iter().map(|s| s.events.len()).max().unwrap_or(0);
    if k > 0 {
        let mut events = Vec::with_capacity(n * k * EVENT_FIELDS);
        for s in samples {
            for e in &s.events {
                events.extend([
                    modality_code(e.modality),
                    e.signature as f64,
                    e.start as f64,
                    e.len as f64,
                    e.patch as f64,
                ]);
            }
            events.extend(std::iter::repeat_n(-1.0, (k - s.events.len()) * EVENT_FIELDS));
        }
        out.push((format!("{name}.events"), stored(&[n, k * EVENT_FIELDS], events, Precision::F64)?));
    }
    Ok(out)
}

/// Container records for a whole task.
pub fn dataset_records(data: &TaskData, precision: Precision) -> Result<NamedTensors> {
    let mut out = vec![(
        "task".to_string(),
        StoredTensor::F64(Tensor::vector(task_vector(&data.config))),
    )];
    for (name, samples) in SPLITS.into_iter().zip([&data.train, &data.val, &data.test]) {
        if !samples.is_empty() {
            out.extend(split_records(name, samples, precision)?);
        }
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, data: &TaskData, precision: Precision) -> Result<()> {
    write_container(path, &dataset_records(data, precision)?)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Config(format!("not a dataset container: {}", detail.into()))
}

fn modality_from(x: f64) -> Result<Modality> {
    match x {
        0.0 => Ok(Modality::Visual),
        1.0 => Ok(Modality::Audio),
        _ => Err(bad(format!("modality code {x}"))),
    }
}

fn index_from(x: f64) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(bad(format!("{x} is not an index")))
    }
}

fn read_split(records: &NamedTensors, name: &str, cfg: &TaskConfig) -> Result<Vec<SyntheticSample>> {
    let get = |field: &str| -> Option<Tensor<f64>> {
        let key = format!("{name}.{field}");
        records.iter().find(|(n, _)| *n == key).map(|(_, t)| t.to())
    };
    let Some(labels) = get("labels") else {
        return Ok(Vec::new());
    };
    let n = labels.len();
    let need = |field: &str, width: usize| -> Result<Tensor<f64>> {
        let t = get(field).ok_or_else(|| bad(format!("missing {name}.{field}")))?;
        if t.dims() != [n, width] {
            return Err(bad(format!("{name}.{field} has dims {:?}, expected [{n}, {width}]", t.dims())));
        }
        Ok(t)
    };
    let (t, dv, da, dq, m) = (cfg.segments, cfg.visual_dim, cfg.audio_dim, cfg.question_dim(), cfg.patches);
    let visual = need("visual", t * dv)?;
    let audio = need("audio", t * da)?;
    let patches = need("patches", t * m * dv)?;
    let sentence = need("sentence", dq)?;
    let words = need("words", QUESTION_TOKENS * dq)?;
    let queries = need("queries", 4)?;
    let events = get("events");
    let k = events.as_ref().map_or(0, |e| e.dims().get(1).copied().unwrap_or(0) / EVENT_FIELDS);

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let q = queries.row(i);
        let family = *QuestionFamily::ALL
            .get(index_from(q[0])?)
            .ok_or_else(|| bad(format!("family code {}", q[0])))?;
        let query = Query {
            family,
            modality: modality_from(q[1])?,
            first: index_from(q[2])?,
            second: if q[3] < 0.0 { None } else { Some(index_from(q[3])?) },
        };
        let mut planted = Vec::new();
        if let Some(e) = &events {
            for rec in e.row(i).chunks(EVENT_FIELDS).take(k) {
                if rec[0] < 0.0 {
                    break;
                }
                planted.push(PlantedEvent {
                    modality: modality_from(rec[0])?,
                    signature: index_from(rec[1])?,
                    start: index_from(rec[2])?,
                    len: index_from(rec[3])?,
                    patch: index_from(rec[4])?,
                });
            }
        }
        out.push(SyntheticSample {
            inputs: RawInputs {
                visual: Tensor::new(&[t, dv], visual.row(i).to_vec())?,
                audio: Tensor::new(&[t, da], audio.row(i).to_vec())?,
                patches: Tensor::new(&[t, m, dv], patches.row(i).to_vec())?,
                sentence: Tensor::new(&[dq], sentence.row(i).to_vec())?,
                words: Tensor::new(&[QUESTION_TOKENS, dq], words.row(i).to_vec())?,
            },
            query,
            events: planted,
            label: index_from(labels.data()[i])?,
        });
    }
    Ok(out)
}

pub fn dataset_from_records(records: &NamedTensors) -> Result<TaskData> {
    let task = records
        .iter()
        .find(|(n, _)| n == "task")
        .ok_or_else(|| bad("no task record"))?;
    let config = task_from_vector(&task.1.to::<f64>().to_f64_vec())?;
    Ok(TaskData {
        train: read_split(records, "train", &config)?,
        val: read_split(records, "val", &config)?,
        test: read_split(records, "test", &config)?,
        config,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TaskData> {
    let path = path.as_ref();
    dataset_from_records(&read_container(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
