//! Raw IQ trace files and their metadata manifests.
//!
//! Trace files use the GNU Radio file-sink convention: a headerless stream of
//! complex samples, each stored as two little-endian IEEE-754 `f32` values,
//! in-phase first, quadrature second. All metadata (device, activity,
//! session, rates, gains) lives in a JSON manifest next to the traces; one
//! manifest entry per trace file.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per complex sample on disk: two `f32` values.
pub const BYTES_PER_SAMPLE: usize = 8;

/// Capture metadata identifying one trace within a corpus.
///
/// `(device_id, activity_label, session_id)` is the unique key. Gain fields
/// default to the amplifier settings used throughout the capture campaign:
/// 14 dB RF, 40 dB IF, 18 dB BB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub device_id: String,
    pub activity_label: String,
    pub session_id: String,
    #[serde(default = "default_rf_gain_db")]
    pub rf_gain_db: f64,
    #[serde(default = "default_if_gain_db")]
    pub if_gain_db: f64,
    #[serde(default = "default_bb_gain_db")]
    pub bb_gain_db: f64,
}

fn default_rf_gain_db() -> f64 {
    14.0
}
fn default_if_gain_db() -> f64 {
    40.0
}
fn default_bb_gain_db() -> f64 {
    18.0
}

impl CaptureMeta {
    pub fn new(device_id: &str, activity_label: &str, session_id: &str) -> Self {
        CaptureMeta {
            device_id: device_id.to_string(),
            activity_label: activity_label.to_string(),
            session_id: session_id.to_string(),
            rf_gain_db: default_rf_gain_db(),
            if_gain_db: default_if_gain_db(),
            bb_gain_db: default_bb_gain_db(),
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.device_id, &self.activity_label, &self.session_id)
    }
}

/// A raw complex baseband recording plus its capture metadata.
#[derive(Debug, Clone)]
pub struct IqTrace {
    pub samples: Vec<Complex<f32>>,
    pub sample_rate_hz: f64,
    pub center_frequency_hz: f64,
    pub meta: CaptureMeta,
}

impl IqTrace {
    /// Validates the invariants required by downstream processing.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data(format!(
                "trace {}/{}/{} has no samples",
                self.meta.device_id, self.meta.activity_label, self.meta.session_id
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "sample_rate_hz must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if !(self.center_frequency_hz > 0.0) {
            return Err(Error::Data(format!(
                "center_frequency_hz must be positive, got {}",
                self.center_frequency_hz
            )));
        }
        Ok(())
    }
}

/// One manifest record: trace file path, rates, and capture metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Trace file path, resolved relative to the manifest's directory.
    pub file: PathBuf,
    pub sample_rate_hz: f64,
    pub center_frequency_hz: f64,
    #[serde(flatten)]
    pub meta: CaptureMeta,
}

/// Reads a `.cfile` into an [`IqTrace`] using the entry's metadata.
///
/// The file must be a whole number of 8-byte samples; anything else is a
/// format error. A zero-length file yields an empty trace, which downstream
/// consumers reject via [`IqTrace::validate`].
pub fn read_cfile(path: &Path, entry: &TraceEntry) -> Result<IqTrace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % BYTES_PER_SAMPLE != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % BYTES_PER_SAMPLE) as u64,
            format!(
                "file length {} is not a multiple of {} bytes per complex sample",
                bytes.len(),
                BYTES_PER_SAMPLE
            ),
        ));
    }
    let samples = bytes
        .chunks_exact(BYTES_PER_SAMPLE)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex::new(re, im)
        })
        .collect();
    Ok(IqTrace {
        samples,
        sample_rate_hz: entry.sample_rate_hz,
        center_frequency_hz: entry.center_frequency_hz,
        meta: entry.meta.clone(),
    })
}

/// Writes a trace as interleaved little-endian `f32` I/Q pairs.
pub fn write_cfile(trace: &IqTrace, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(trace.samples.len() * BYTES_PER_SAMPLE);
    for s in &trace.samples {
        bytes.extend_from_slice(&s.re.to_le_bytes());
        bytes.extend_from_slice(&s.im.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and validates a corpus manifest (a JSON array of [`TraceEntry`]).
///
/// Rejects duplicate `(device_id, activity_label, session_id)` keys.
pub fn load_manifest(path: &Path) -> Result<Vec<TraceEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<TraceEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    check_unique_keys(&entries)?;
    Ok(entries)
}

/// Serializes a manifest as pretty-printed JSON.
pub fn save_manifest(entries: &[TraceEntry], path: &Path) -> Result<()> {
    check_unique_keys(entries)?;
    let mut text = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_unique_keys(entries: &[TraceEntry]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for entry in entries {
        if !seen.insert(entry.meta.key()) {
            let (d, a, s) = entry.meta.key();
            return Err(Error::Conflict(format!(
                "duplicate manifest key (device {d}, activity {a}, session {s})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(device: &str, activity: &str, session: &str) -> TraceEntry {
        TraceEntry {
            file: PathBuf::from(format!("{device}_{session}_{activity}.cfile")),
            sample_rate_hz: 20e6,
            center_frequency_hz: 3.23e9,
            meta: CaptureMeta::new(device, activity, session),
        }
    }

    #[test]
    fn single_sample_file_decodes_to_one_complex_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.cfile");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.5f32).to_le_bytes());
        fs::write(&path, &bytes).unwrap();

        let trace = read_cfile(&path, &entry("a", "idle", "s0")).unwrap();
        assert_eq!(trace.samples, vec![Complex::new(1.0, -0.5)]);
    }

    #[test]
    fn empty_file_is_format_valid_but_rejected_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cfile");
        fs::write(&path, b"").unwrap();

        let trace = read_cfile(&path, &entry("a", "idle", "s0")).unwrap();
        assert!(trace.samples.is_empty());
        assert!(matches!(trace.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truncated.cfile");
        fs::write(&path, [0u8; 13]).unwrap();

        match read_cfile(&path, &entry("a", "idle", "s0")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_path_is_an_io_error() {
        let err = read_cfile(Path::new("/nonexistent/x.cfile"), &entry("a", "idle", "s0"))
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn write_then_read_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.cfile");
        let e = entry("a", "idle", "s0");
        let trace = IqTrace {
            samples: vec![
                Complex::new(0.25, -1.0),
                Complex::new(f32::MIN_POSITIVE, 3.5e7),
            ],
            sample_rate_hz: e.sample_rate_hz,
            center_frequency_hz: e.center_frequency_hz,
            meta: e.meta.clone(),
        };
        write_cfile(&trace, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16);

        let back = read_cfile(&path, &e).unwrap();
        assert_eq!(back.samples, trace.samples);

        // Byte-level identity when writing the reread trace again.
        let path2 = dir.path().join("rt2.cfile");
        write_cfile(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_trace_writes_zero_byte_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty_out.cfile");
        let e = entry("a", "idle", "s0");
        let trace = IqTrace {
            samples: vec![],
            sample_rate_hz: e.sample_rate_hz,
            center_frequency_hz: e.center_frequency_hz,
            meta: e.meta,
        };
        write_cfile(&trace, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 0);
    }

    #[test]
    fn manifest_round_trip_with_smartphone_activity_set() {
        let activities = [
            "calendar-app",
            "camera-photo",
            "camera-video",
            "email-app",
            "gallery-app",
            "home-screen",
            "idle",
            "phone-app",
            "sms-app",
            "web-browser-app",
        ];
        let entries: Vec<TraceEntry> = activities
            .iter()
            .map(|a| entry("iPhone13-I", a, "s0"))
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&entries, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded, entries);
    }

    #[test]
    fn manifest_loads_iot_activity_set() {
        let activities = [
            "blinky",
            "blinky_freertos",
            "blinky_rtc_freertos",
            "blinky_systick",
            "led_softblink",
            "BLINK_new",
            "IDLE_new",
            "Matrix_multiplication_new",
        ];
        let entries: Vec<TraceEntry> = activities
            .iter()
            .map(|a| entry("Nordic-1", a, "s0"))
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&entries, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 8);
    }

    #[test]
    fn duplicate_key_triple_is_a_conflict() {
        let entries = vec![entry("a", "idle", "s0"), entry("a", "idle", "s0")];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Conflict(_))));
    }

    #[test]
    fn missing_field_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"[{"file":"x.cfile","sample_rate_hz":1e6,"center_frequency_hz":2e9,
                 "activity_label":"idle","session_id":"s0"}]"#,
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::Schema(msg)) => assert!(msg.contains("device_id"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn gains_default_to_capture_campaign_settings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"[{"file":"x.cfile","sample_rate_hz":1e6,"center_frequency_hz":2e9,
                 "device_id":"a","activity_label":"idle","session_id":"s0"}]"#,
        )
        .unwrap();
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries[0].meta.rf_gain_db, 14.0);
        assert_eq!(entries[0].meta.if_gain_db, 40.0);
        assert_eq!(entries[0].meta.bb_gain_db, 18.0);
    }
}
