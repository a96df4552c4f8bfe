use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent deterministic stream derived from a base seed and a label.
pub fn sub_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(label.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    std::fs::write(path, text + "\n").map_err(|e| crate::Error::io("writing json", path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io("reading json", path, e))?;
    serde_json::from_str(&text).map_err(|e| crate::Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

pub(crate) fn create_dir(path: &std::path::Path) -> crate::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| crate::Error::io("creating directory", path, e))
}
