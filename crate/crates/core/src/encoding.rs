//! Portable encodings for numeric arrays inside artifacts.

/// Serde adapter storing a `Vec<f64>` as little-endian IEEE-754 bytes in
/// base64, tagged with its encoding so readers can reject unknown layouts.
pub mod f64_le {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub const TAG: &str = "f64le/base64";

    #[derive(Serialize, Deserialize)]
    struct Packed {
        encoding: String,
        len: usize,
        data: String,
    }

    pub fn encode(values: &[f64]) -> String {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        STANDARD.encode(bytes)
    }

    pub fn decode(data: &str, len: usize) -> Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(data).map_err(|e| e.to_string())?;
        if bytes.len() != len * 8 {
            return Err(format!("expected {} bytes, found {}", len * 8, bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        Packed {
            encoding: TAG.to_owned(),
            len: values.len(),
            data: encode(values),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let p = Packed::deserialize(d)?;
        if p.encoding != TAG {
            return Err(D::Error::custom(format!(
                "unsupported array encoding {:?}",
                p.encoding
            )));
        }
        decode(&p.data, p.len).map_err(D::Error::custom)
    }
}
