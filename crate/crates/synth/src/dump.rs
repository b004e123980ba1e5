//! Binary dataset dumps.
//!
//! A dump directory holds one `<split>.bin` file per split and a
//! `manifest.json`. Each `.bin` file is a sequence of records, each written as
//! a little-endian `u32` payload length in bytes followed by the payload. All
//! integers are little-endian `u32` and all tensors little-endian `f32`,
//! row-major.
//!
//! Sort-of-CLEVR payload, in order:
//! 1. image, `64·64·3` floats over `(y, x, channel)`
//! 2. question, 11 floats
//! 3. answer, `u32`
//! 4. object count `n`, `u32`
//! 5. `n` objects, each `color, shape (0 square, 1 circle), x, y` as `u32`
//!
//! Noise-toy payload, in order:
//! 1. latent `z`, 8 floats
//! 2. task 1, task 2 and task 3 tokens, `m·d` floats each
//! 3. `labels1`, `labels2` as `u32`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use kem_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::clevr::{
    gen_sort_of_clevr_range, ClevrOptions, Question, SceneObject, Shape, SortOfClevrSample, IMAGE_SIZE, QUESTION_LEN,
};
use crate::error::{Error, Result};
use crate::noise::{NoiseToy, NoiseToyBatch, LATENT_DIM};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub const CLEVR_FIELDS: [&str; 5] = ["image", "question", "answer", "object_count", "objects"];
pub const NOISE_FIELDS: [&str; 6] = [
    "z",
    "task1_tokens",
    "task2_tokens",
    "task3_tokens",
    "labels1",
    "labels2",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
    /// Index of the first sample in the generator's sequence.
    pub start: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub format_version: u32,
    pub seed: u64,
    pub splits: Vec<SplitEntry>,
    pub imbalance: Option<crate::clevr::ImbalanceSpec>,
    pub degenerate: bool,
    pub field_order: Vec<String>,
    pub rng: String,
    /// Dataset-specific sizes, e.g. image side or `m`, `d`.
    pub dims: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        Ok(serde_json::from_reader(BufReader::new(File::open(
            dir.join(MANIFEST_FILE),
        )?))?)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(path)
    }
}

const RNG_NAME: &str = "ChaCha8 (rand_chacha), seed_from_u64, one stream per (sample, purpose)";

struct Payload(Vec<u8>);

impl Payload {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn floats<'a>(&mut self, v: impl IntoIterator<Item = &'a f32>) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n;
        let s = self
            .buf
            .get(self.at..end)
            .ok_or_else(|| Error::Format(format!("record truncated at byte {}", self.at)))?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in record",
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

fn write_records(path: &Path, records: impl Iterator<Item = Vec<u8>>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        let len = u32::try_from(r.len()).map_err(|_| Error::Format("record over 4 GiB".into()))?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(&r)?;
    }
    f.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<Vec<u8>>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut cur = Cursor { buf: &bytes, at: 0 };
    while cur.at < bytes.len() {
        let len = cur.u32()? as usize;
        out.push(cur.take(len)?.to_vec());
    }
    Ok(out)
}

pub fn encode_clevr(s: &SortOfClevrSample) -> Vec<u8> {
    let mut p = Payload(Vec::new());
    p.floats(s.image.data());
    p.floats(&s.question.encode());
    p.u32(s.answer as u32);
    p.u32(s.objects.len() as u32);
    for o in &s.objects {
        p.u32(o.color as u32);
        p.u32(o.shape.code());
        p.u32(o.center.0);
        p.u32(o.center.1);
    }
    p.0
}

pub fn decode_clevr(record: &[u8]) -> Result<SortOfClevrSample> {
    let mut c = Cursor { buf: record, at: 0 };
    let image = Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], c.floats(IMAGE_SIZE * IMAGE_SIZE * 3)?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let question =
        Question::decode(&c.floats(QUESTION_LEN)?).ok_or_else(|| Error::Format("bad question bits".into()))?;
    let answer = c.u32()? as usize;
    let n = c.u32()? as usize;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let color = c.u32()? as usize;
        let shape = Shape::from_code(c.u32()?).ok_or_else(|| Error::Format("bad shape code".into()))?;
        let center = (c.u32()?, c.u32()?);
        objects.push(SceneObject { color, shape, center });
    }
    c.finish()?;
    Ok(SortOfClevrSample {
        image,
        objects,
        question,
        answer,
    })
}

pub fn write_clevr_split(path: &Path, samples: &[SortOfClevrSample]) -> Result<()> {
    write_records(path, samples.iter().map(encode_clevr))
}

pub fn read_clevr_split(path: &Path) -> Result<Vec<SortOfClevrSample>> {
    read_records(path)?.iter().map(|r| decode_clevr(r)).collect()
}

/// Generates and writes each `(name, count)` split as consecutive index
/// ranges of one sequence, then the manifest.
pub fn dump_sort_of_clevr(dir: &Path, seed: u64, splits: &[(&str, usize)], options: &ClevrOptions) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut start = 0u64;
    for &(name, count) in splits {
        let samples = gen_sort_of_clevr_range(seed, start, count, options)?;
        let file = format!("{name}.bin");
        write_clevr_split(&dir.join(&file), &samples)?;
        entries.push(SplitEntry {
            name: name.to_string(),
            file,
            count,
            start,
        });
        start += count as u64;
    }
    let mut dims = serde_json::Map::new();
    dims.insert("image_size".into(), IMAGE_SIZE.into());
    dims.insert("question_len".into(), QUESTION_LEN.into());
    let manifest = Manifest {
        dataset: "sort-of-clevr".into(),
        format_version: FORMAT_VERSION,
        seed,
        splits: entries,
        imbalance: options.imbalance,
        degenerate: options.degenerate,
        field_order: CLEVR_FIELDS.iter().map(|s| s.to_string()).collect(),
        rng: RNG_NAME.into(),
        dims,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

fn f32s(t: &Tensor<f64>, range: std::ops::Range<usize>) -> Vec<f32> {
    t.data()[range].iter().map(|&v| v as f32).collect()
}

pub fn write_noise_split(path: &Path, b: &NoiseToyBatch) -> Result<()> {
    let w = b.m * b.d;
    write_records(
        path,
        (0..b.batch).map(|i| {
            let mut p = Payload(Vec::new());
            p.floats(&f32s(&b.z, i * LATENT_DIM..(i + 1) * LATENT_DIM));
            for t in [&b.task1_tokens, &b.task2_tokens, &b.task3_tokens] {
                p.floats(&f32s(t, i * w..(i + 1) * w));
            }
            p.u32(b.labels1[i] as u32);
            p.u32(b.labels2[i] as u32);
            p.0
        }),
    )
}

/// Reads a noise-toy split back; values are the `f32`-rounded originals.
pub fn read_noise_split(path: &Path, m: usize, d: usize) -> Result<NoiseToyBatch> {
    let records = read_records(path)?;
    let n = records.len();
    if n == 0 {
        return Err(Error::Format("empty split".into()));
    }
    let w = m * d;
    let (mut z, mut t, mut l1, mut l2) = (Vec::new(), [Vec::new(), Vec::new(), Vec::new()], Vec::new(), Vec::new());
    for r in &records {
        let mut c = Cursor { buf: r, at: 0 };
        z.extend(c.floats(LATENT_DIM)?.into_iter().map(f64::from));
        for tt in &mut t {
            tt.extend(c.floats(w)?.into_iter().map(f64::from));
        }
        l1.push(c.u32()? as usize);
        l2.push(c.u32()? as usize);
        c.finish()?;
    }
    let fmt = |e: kem_core::Error| Error::Format(e.to_string());
    let [t1, t2, t3] = t;
    Ok(NoiseToyBatch {
        batch: n,
        m,
        d,
        z: Tensor::new(vec![n, LATENT_DIM], z).map_err(fmt)?,
        task1_tokens: Tensor::new(vec![n, m, d], t1).map_err(fmt)?,
        task2_tokens: Tensor::new(vec![n, m, d], t2).map_err(fmt)?,
        task3_tokens: Tensor::new(vec![n, m, d], t3).map_err(fmt)?,
        labels1: l1,
        labels2: l2,
    })
}

pub fn dump_noise_toy(dir: &Path, seed: u64, m: usize, d: usize, splits: &[(&str, usize)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let toy = NoiseToy::new(seed, m, d)?;
    let mut entries = Vec::new();
    let mut start = 0u64;
    for &(name, count) in splits {
        if count == 0 {
            return Err(Error::Contract(format!("split {name} is empty")));
        }
        let file = format!("{name}.bin");
        write_noise_split(&dir.join(&file), &toy.batch(start, count))?;
        entries.push(SplitEntry {
            name: name.to_string(),
            file,
            count,
            start,
        });
        start += count as u64;
    }
    let mut dims = serde_json::Map::new();
    dims.insert("m".into(), m.into());
    dims.insert("d".into(), d.into());
    dims.insert("latent_dim".into(), LATENT_DIM.into());
    let manifest = Manifest {
        dataset: "noise-toy".into(),
        format_version: FORMAT_VERSION,
        seed,
        splits: entries,
        imbalance: None,
        degenerate: false,
        field_order: NOISE_FIELDS.iter().map(|s| s.to_string()).collect(),
        rng: RNG_NAME.into(),
        dims,
    };
    manifest.write(dir)?;
    Ok(manifest)
}
