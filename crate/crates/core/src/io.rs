//! On-disk formats: tensor files, checkpoint directories, image datasets and
//! prior sets. Every file is written to a temporary sibling and renamed into
//! place, so a failed run never leaves a half-written output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, CalibrationTable, Image, ModelState, CLIP_DIM};
use crate::prompts::{Prompt, Vocabulary};
use crate::scalar::Scalar;
use crate::schedule::ScheduleSpec;
use crate::world::{GateReport, Pair, PriorSet, World, WorldSpec};

pub const BUILD_ID: &str = concat!("comfusion-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Header line plus little-endian payload.
pub fn encode_tensor<T: Scalar>(shape: &[usize], data: &[T]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            got: vec![data.len()],
        });
    }
    let header = TensorHeader {
        dtype: T::DTYPE.to_owned(),
        shape: shape.to_vec(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(n * T::byte_width());
    for &v in data {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_tensor<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<T>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::corrupt(path, "missing header line"))?;
    let header: TensorHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::corrupt(path, format!("dtype {} where {} expected", header.dtype, T::DTYPE)));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != n * T::byte_width() {
        return Err(Error::corrupt(
            path,
            format!(
                "shape {:?} needs {} bytes, payload has {}",
                header.shape,
                n * T::byte_width(),
                payload.len()
            ),
        ));
    }
    let data = payload.chunks_exact(T::byte_width()).map(T::read_le).collect();
    Ok((header.shape, data))
}

pub fn save_tensor<T: Scalar>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    write_atomic(path, &encode_tensor(shape, data)?)
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    decode_tensor(path, &read_bytes(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub partition: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub build_id: String,
    pub dtype: String,
    pub arch: ArchConfig,
    pub schedule: ScheduleSpec,
    pub vocab_file: String,
    pub vocab_sha256: String,
    pub calibration_keys: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
}

fn tensor_file(partition: &str, name: &str) -> String {
    format!("{partition}.{name}.tensor")
}

/// Writes a checkpoint directory. The directory is assembled under a
/// temporary name and renamed into place.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    state: &ModelState<T>,
    seeds: BTreeMap<String, u64>,
    config_hash: &str,
) -> Result<()> {
    let parent = match dir.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".checkpoint-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;

    let mut tensors = Vec::new();
    for (partition, params) in [("trainable", state.trainable()), ("frozen", state.frozen())] {
        for id in params.ids() {
            let name = params.name(id).to_owned();
            let (r, c) = params.shape(id);
            let bytes = encode_tensor(&[r, c], params.get(id))?;
            let file = tensor_file(partition, &name);
            write_atomic(&tmp.path().join(&file), &bytes)?;
            tensors.push(TensorEntry {
                name,
                partition: partition.to_owned(),
                file,
                shape: vec![r, c],
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let vocab = state.vocab().to_file_string();
    write_atomic(&tmp.path().join("vocab.txt"), vocab.as_bytes())?;
    let manifest = CheckpointManifest {
        build_id: BUILD_ID.to_owned(),
        dtype: T::DTYPE.to_owned(),
        arch: state.arch().clone(),
        schedule: state.schedule_spec(),
        vocab_file: "vocab.txt".into(),
        vocab_sha256: sha256_hex(vocab.as_bytes()),
        calibration_keys: state.calibration_keys().to_vec(),
        tensors,
        seeds,
        config_hash: config_hash.to_owned(),
    };
    write_json(&tmp.path().join("manifest.json"), &manifest)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Loads and verifies a checkpoint: every listed file must exist and match
/// its checksum and shape.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelState<T>, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::corrupt(&mpath, format!("checkpoint dtype {}", manifest.dtype)));
    }
    let vpath = dir.join(&manifest.vocab_file);
    let vbytes = read_bytes(&vpath)?;
    if sha256_hex(&vbytes) != manifest.vocab_sha256 {
        return Err(Error::corrupt(&vpath, "checksum mismatch"));
    }
    let vocab = Vocabulary::parse_file(&String::from_utf8_lossy(&vbytes))?;
    let mut trainable = ParamSet::new();
    let mut frozen = ParamSet::new();
    for e in &manifest.tensors {
        let path = dir.join(&e.file);
        let bytes = read_bytes(&path)?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        let (shape, data) = decode_tensor::<T>(&path, &bytes)?;
        if shape != e.shape || shape.len() != 2 {
            return Err(Error::corrupt(&path, format!("shape {shape:?} disagrees with manifest {:?}", e.shape)));
        }
        let target = match e.partition.as_str() {
            "trainable" => &mut trainable,
            "frozen" => &mut frozen,
            other => return Err(Error::corrupt(&mpath, format!("unknown partition `{other}`"))),
        };
        target.push(e.name.clone(), shape[0], shape[1], data);
    }
    let state = ModelState::from_parts(
        manifest.arch.clone(),
        manifest.schedule,
        vocab,
        trainable,
        frozen,
        manifest.calibration_keys.clone(),
    )?;
    Ok((state, manifest))
}

/// Content id of a checkpoint: the hash of its manifest, which in turn
/// pins every tensor.
pub fn checkpoint_id(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(&dir.join("manifest.json"))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetLine {
    prompt: String,
    file: String,
    seed: u64,
}

/// Image dataset: `manifest.jsonl` plus one tensor file per image.
pub fn save_pairs<T: Scalar>(dir: &Path, pairs: &[Pair<T>]) -> Result<()> {
    let mut lines = String::new();
    for (i, p) in pairs.iter().enumerate() {
        let file = format!("images/{i:05}.tensor");
        save_tensor(&dir.join(&file), &p.image.shape(), &p.image.data)?;
        let line = DatasetLine {
            prompt: p.prompt.to_string(),
            file,
            seed: p.seed,
        };
        lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
        lines.push('\n');
    }
    write_atomic(&dir.join("manifest.jsonl"), lines.as_bytes())
}

pub fn load_pairs<T: Scalar>(dir: &Path) -> Result<Vec<Pair<T>>> {
    let mpath = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: DatasetLine = serde_json::from_str(l).map_err(|e| Error::Json {
                path: mpath.clone(),
                source: e,
            })?;
            Ok(Pair {
                image: load_image(&dir.join(&line.file))?,
                prompt: Prompt::parse(&line.prompt),
                seed: line.seed,
            })
        })
        .collect()
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let (shape, data) = load_tensor(path)?;
    if shape.len() != 3 {
        return Err(Error::corrupt(path, format!("image tensor of rank {}", shape.len())));
    }
    Image::new(shape[0], shape[1], shape[2], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PriorMeta {
    seed: u64,
    source: String,
    count: usize,
}

pub fn save_priors<T: Scalar>(dir: &Path, set: &PriorSet<T>) -> Result<()> {
    save_pairs(dir, &set.pairs)?;
    write_json(
        &dir.join("priors.json"),
        &PriorMeta {
            seed: set.seed,
            source: set.source.clone(),
            count: set.pairs.len(),
        },
    )
}

pub fn load_priors<T: Scalar>(dir: &Path) -> Result<PriorSet<T>> {
    let meta: PriorMeta = read_json(&dir.join("priors.json"))?;
    let pairs = load_pairs(dir)?;
    if pairs.len() != meta.count {
        return Err(Error::corrupt(dir, format!("{} pairs where {} listed", pairs.len(), meta.count)));
    }
    Ok(PriorSet {
        pairs,
        seed: meta.seed,
        source: meta.source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldFile {
    spec: WorldSpec,
    gates: GateReport,
    calibration_keys: Vec<(String, String)>,
    calibration_sha256: String,
}

/// World directory: spec, gate report, vocabulary and calibration tensor.
pub fn save_world<T: Scalar>(dir: &Path, world: &World<T>) -> Result<()> {
    let bytes = encode_tensor(&[world.calibration.rows.len(), CLIP_DIM], &world.calibration.flat())?;
    write_atomic(&dir.join("calibration.tensor"), &bytes)?;
    write_atomic(&dir.join("vocab.txt"), world.vocab.to_file_string().as_bytes())?;
    write_json(
        &dir.join("world.json"),
        &WorldFile {
            spec: world.spec.clone(),
            gates: world.gates.clone(),
            calibration_keys: world.calibration.keys.clone(),
            calibration_sha256: sha256_hex(&bytes),
        },
    )
}

pub fn load_world<T: Scalar>(dir: &Path) -> Result<World<T>> {
    let wf: WorldFile = read_json(&dir.join("world.json"))?;
    let cpath = dir.join("calibration.tensor");
    let bytes = read_bytes(&cpath)?;
    if sha256_hex(&bytes) != wf.calibration_sha256 {
        return Err(Error::corrupt(&cpath, "checksum mismatch"));
    }
    let (shape, data) = decode_tensor::<T>(&cpath, &bytes)?;
    if shape != [wf.calibration_keys.len(), CLIP_DIM] {
        return Err(Error::corrupt(&cpath, "calibration shape disagrees with its keys"));
    }
    let rows = data.chunks(CLIP_DIM).map(<[T]>::to_vec).collect();
    Ok(World {
        vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
        spec: wf.spec,
        calibration: CalibrationTable {
            keys: wf.calibration_keys,
            rows,
        },
        gates: wf.gates,
    })
}

/// Binary PPM (P6) for eyeballing.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for v in &img.data {
        let b = (crate::scalar::f(*v).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(b);
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::testing::small_state;
    use crate::nets::LatentMode;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        let data = vec![0.1, -2.5e-300, f64::MAX, 1.0 / 3.0, -0.0, 7.0];
        save_tensor(&p, &[2, 3], &data).unwrap();
        let (shape, back) = load_tensor::<f64>(&p).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert!(data.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn short_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tensor");
        let mut bytes = b"{\"dtype\":\"f64\",\"shape\":[2,3]}\n".to_vec();
        for v in [1.0f64, 2.0, 3.0, 4.0, 5.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_tensor::<f64>(&p), Err(Error::Corrupt { .. })));
        assert!(save_tensor(&p, &[2, 3], &[1.0f64; 5]).is_err());
    }

    #[test]
    fn scalar_shape_supported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tensor");
        save_tensor(&p, &[], &[4.25f32]).unwrap();
        assert_eq!(load_tensor::<f32>(&p).unwrap(), (vec![], vec![4.25f32]));
        assert!(load_tensor::<f64>(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        let s = small_state(8, LatentMode::Linear { dim: 40, seed: 2 });
        let seeds = BTreeMap::from([("init".to_string(), 3u64)]);
        save_checkpoint(&ck, &s, seeds.clone(), "abc").unwrap();
        let (back, m) = load_checkpoint::<f64>(&ck).unwrap();
        assert_eq!(m.seeds, seeds);
        for (a, b) in [(s.trainable(), back.trainable()), (s.frozen(), back.frozen())] {
            assert_eq!(a.len(), b.len());
            for id in a.ids() {
                assert_eq!(a.name(id), b.name(id));
                assert_eq!(a.get(id), b.get(id));
            }
        }
        assert_eq!(back.vocab(), s.vocab());
        // saving twice gives identical bytes
        let ck2 = dir.path().join("ck2");
        save_checkpoint(&ck2, &back, seeds, "abc").unwrap();
        assert_eq!(checkpoint_id(&ck).unwrap(), checkpoint_id(&ck2).unwrap());

        let victim = ck.join(&m.tensors[0].file);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&ck), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = WorldSpec::default();
        let pairs = crate::world::build_pretrain_corpus::<f64>(&w, 1, 5).unwrap();
        save_pairs(dir.path(), &pairs[..3]).unwrap();
        assert_eq!(load_pairs::<f64>(dir.path()).unwrap(), pairs[..3].to_vec());
    }
}
