//! CCKP checkpoint container: config snapshot, step counter, every named
//! parameter as a CCTF block, optimizer moments, and the augmentation rng
//! state. Writing is canonical, so saving what was just loaded reproduces
//! the file byte for byte.

use anyhow::{anyhow, bail, Context, Result};
use ccformer_model::params::ParamStore;
use ccformer_tensor::{cctf, Scalar, Tensor};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::optim::AdamW;

pub const MAGIC: [u8; 4] = *b"CCKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: Config,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<T>)>,
    pub opt_m: Vec<Tensor<f64>>,
    pub opt_v: Vec<Tensor<f64>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        config: &Config,
        step: u64,
        rng: RngState,
        store: &ParamStore<T>,
        opt: &AdamW,
    ) -> Checkpoint<T> {
        let params: Vec<(String, Tensor<T>)> = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        let moments = |vals: &[Vec<f64>]| -> Vec<Tensor<f64>> {
            store
                .ids()
                .zip(vals)
                .map(|(id, m)| {
                    Tensor::from_vec(store.get(id).shape().to_vec(), m.clone()).unwrap()
                })
                .collect()
        };
        Checkpoint {
            config: config.clone(),
            step,
            rng,
            params,
            opt_m: moments(&opt.m),
            opt_v: moments(&opt.v),
        }
    }

    /// Copies stored parameter values into a store freshly built from the
    /// same config. Name sets must agree exactly.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.ids().count() != self.params.len() {
            bail!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.ids().count()
            );
        }
        for (name, value) in &self.params {
            let id = store
                .lookup(name)
                .ok_or_else(|| anyhow!("checkpoint parameter `{name}` unknown to the model"))?;
            store
                .set(id, value.clone())
                .with_context(|| format!("restoring parameter `{name}`"))?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        if opt.m.len() != self.opt_m.len() {
            bail!("checkpoint holds {} moment pairs, optimizer has {}", self.opt_m.len(), opt.m.len());
        }
        opt.step = self.step;
        for (slot, stored) in opt.m.iter_mut().zip(&self.opt_m) {
            if slot.len() != stored.data().len() {
                bail!("first-moment size mismatch");
            }
            slot.copy_from_slice(stored.data());
        }
        for (slot, stored) in opt.v.iter_mut().zip(&self.opt_v) {
            if slot.len() != stored.data().len() {
                bail!("second-moment size mismatch");
            }
            slot.copy_from_slice(stored.data());
        }
        Ok(())
    }

    /// Errors unless the checkpoint was produced under a config with the
    /// same training trajectory; output paths and logging cadence may vary.
    pub fn require_config(&self, cfg: &Config) -> Result<()> {
        if self.config.trajectory_json() != cfg.trajectory_json() {
            bail!("checkpoint config does not match the active config");
        }
        Ok(())
    }
}

fn put_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes()).map_err(|e| anyhow!(e))
}

fn put_u64(out: &mut impl Write, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes()).map_err(|e| anyhow!(e))
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    let config = ckpt.config.canonical_json();
    put_u32(&mut w, config.len() as u32)?;
    w.write_all(config.as_bytes())?;
    put_u64(&mut w, ckpt.step)?;
    put_u64(&mut w, ckpt.rng.seed)?;
    put_u64(&mut w, ckpt.rng.stream)?;
    w.write_all(&ckpt.rng.word_pos.to_le_bytes())?;
    put_u32(&mut w, ckpt.params.len() as u32)?;
    for (name, tensor) in &ckpt.params {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        cctf::write_tensor(&mut w, tensor)?;
    }
    for m in &ckpt.opt_m {
        cctf::write_tensor(&mut w, m)?;
    }
    for v in &ckpt.opt_v {
        cctf::write_tensor(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads only the config snapshot, for precision dispatch before a typed
/// load.
pub fn read_config(path: &Path) -> Result<Config> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut r = BufReader::new(file);
    read_header(&mut r, path)
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Config> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    if head[..4] != MAGIC {
        bail!("{} is not a CCKP checkpoint", path.display());
    }
    if head[4] != VERSION {
        bail!("{}: unsupported checkpoint version {}", path.display(), head[4]);
    }
    let len = get_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    Config::from_json(std::str::from_utf8(&json)?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut r = BufReader::new(file);
    let config = read_header(&mut r, path)?;
    let step = get_u64(&mut r)?;
    let seed = get_u64(&mut r)?;
    let stream = get_u64(&mut r)?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp)?;
    let rng = RngState { seed, stream, word_pos: u128::from_le_bytes(wp) };
    let count = get_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let tensor: Tensor<T> = cctf::read_tensor(&mut r)?;
        params.push((String::from_utf8(name)?, tensor));
    }
    let mut opt_m = Vec::with_capacity(count);
    for _ in 0..count {
        opt_m.push(cctf::read_tensor::<f64, _>(&mut r)?);
    }
    let mut opt_v = Vec::with_capacity(count);
    for _ in 0..count {
        opt_v.push(cctf::read_tensor::<f64, _>(&mut r)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        bail!("{}: trailing bytes after checkpoint", path.display());
    }
    Ok(Checkpoint { config, step, rng, params, opt_m, opt_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccformer_model::model::CcformerParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.d = 16;
        cfg.model.heads = 2;
        cfg.model.encoder_layers = 1;
        cfg.model.aqg_layers = 1;
        cfg.model.decoder_blocks = 1;
        cfg.model.iti_per_block = 1;
        cfg.data.canvas = 32;
        cfg.data.t = Some(2);
        cfg
    }

    fn build<T: Scalar>(cfg: &Config) -> (ParamStore<T>, AdamW) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        CcformerParams::new(&mut store, &mut rng, cfg.model_config()).unwrap();
        let opt = AdamW::for_store(cfg.train.lr, cfg.train.weight_decay, &store);
        (store, opt)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small_config();
        let (store, mut opt) = build::<f64>(&cfg);
        opt.m[3][0] = 0.125;
        opt.v[3][0] = 0.5;
        opt.step = 7;
        let rng = RngState { seed: 3, stream: 9, word_pos: 123456789 };
        let ckpt = Checkpoint::capture(&cfg, 7, rng, &store, &opt);

        let dir = TempDir::new().unwrap();
        let p1 = dir.path().join("a.cckp");
        let p2 = dir.path().join("b.cckp");
        save(&p1, &ckpt).unwrap();
        let loaded: Checkpoint<f64> = load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn restore_round_trips_params_and_moments() {
        let cfg = small_config();
        let (store, mut opt) = build::<f64>(&cfg);
        opt.m[0][1] = -0.25;
        opt.step = 4;
        let rng = RngState { seed: 0, stream: 0, word_pos: 0 };
        let ckpt = Checkpoint::capture(&cfg, 4, rng, &store, &opt);

        let (mut store2, mut opt2) = build::<f64>(&cfg);
        let victim = store2.ids().next().unwrap();
        let zeros = Tensor::zeros(store2.get(victim).shape().to_vec());
        store2.set(victim, zeros).unwrap();
        ckpt.restore_params(&mut store2).unwrap();
        ckpt.restore_optimizer(&mut opt2).unwrap();
        for (a, b) in store.ids().zip(store2.ids()) {
            assert_eq!(store.get(a).data(), store2.get(b).data());
        }
        assert_eq!(opt2.m, opt.m);
        assert_eq!(opt2.step, 4);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = small_config();
        let (store, opt) = build::<f64>(&cfg);
        let rng = RngState { seed: 0, stream: 0, word_pos: 0 };
        let ckpt = Checkpoint::capture(&cfg, 0, rng, &store, &opt);
        ckpt.require_config(&cfg).unwrap();
        let mut other = cfg.clone();
        other.model.n_queries = 7;
        assert!(ckpt.require_config(&other).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let cfg = small_config();
        let (store, opt) = build::<f32>(&cfg);
        let rng = RngState { seed: 0, stream: 0, word_pos: 0 };
        let ckpt = Checkpoint::capture(&cfg, 0, rng, &store, &opt);
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.cckp");
        save(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(load::<f32>(&path).is_err());
        assert!(read_config(&path).is_err());
    }
}
