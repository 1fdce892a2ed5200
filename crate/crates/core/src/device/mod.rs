//! Block devices.
//!
//! Every backend accepts 512-byte aligned requests within its capacity and
//! reports a response time in microseconds for each call. Backends also own
//! the notion of time used by the runner: the raw backend uses a monotonic
//! wall clock, while simulated backends advance a virtual clock and execute
//! pauses instantly.

mod raw;
mod sim;

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::SECTOR;

pub use raw::{probe_capabilities, AlignedBuf, Capabilities, RawDevice};
pub use sim::{FtlSimulator, GcMode, LogOrder, SimCounters, SimProfile};

pub trait BlockDevice: Send {
    /// Stable identifier used in artifact paths.
    fn id(&self) -> String;

    fn capacity(&self) -> u64;

    /// Reads `size` bytes at `lba`; returns the response time in microseconds.
    fn read(&mut self, lba: u64, size: u64) -> Result<u64>;

    /// Writes `data` at `lba`; returns the response time in microseconds.
    fn write(&mut self, lba: u64, data: &[u8]) -> Result<u64>;

    /// Current device time in microseconds.
    fn now_us(&self) -> u64;

    /// Leaves the device idle for `us` microseconds. Returns the number of
    /// background reclamations that completed meanwhile, when observable.
    fn idle(&mut self, us: u64) -> u64;

    fn is_simulated(&self) -> bool;

    fn snapshot(&self) -> Result<Snapshot> {
        Err(Error::Unsupported("state snapshots"))
    }

    fn restore(&mut self, _snapshot: &Snapshot) -> Result<()> {
        Err(Error::Unsupported("state snapshots"))
    }

    /// An independent handle on the same device for a concurrent worker.
    fn open_worker(&self) -> Result<Box<dyn BlockDevice>> {
        Err(Error::Unsupported("concurrent worker handles"))
    }
}

/// Rejects requests that are unaligned, empty or out of range.
pub fn check_request(capacity: u64, lba: u64, size: u64) -> Result<()> {
    if !lba.is_multiple_of(SECTOR) || !size.is_multiple_of(SECTOR) || size == 0 {
        return Err(Error::BadRequest(format!("request at {lba} of {size} bytes is not sector aligned")));
    }
    if lba.checked_add(size).is_none_or(|end| end > capacity) {
        return Err(Error::BadRequest(format!("request at {lba} of {size} bytes exceeds capacity {capacity}")));
    }
    Ok(())
}

/// Opaque, versioned image of a simulated device's state.
#[derive(Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub(crate) bytes: Vec<u8>,
}

impl Snapshot {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Snapshot { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Hex SHA-256 of the encoded state.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(&self.bytes))
    }
}

impl std::fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Snapshot").field("len", &self.bytes.len()).field("digest", &self.digest()).finish()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// A device whose every IO costs the same; useful as a calibration control.
#[derive(Debug, Clone)]
pub struct ConstantDevice {
    capacity: u64,
    read_us: u64,
    write_us: u64,
    clock_us: u64,
}

impl ConstantDevice {
    pub fn new(capacity: u64, read_us: u64, write_us: u64) -> Self {
        ConstantDevice { capacity, read_us: read_us.max(1), write_us: write_us.max(1), clock_us: 0 }
    }
}

impl BlockDevice for ConstantDevice {
    fn id(&self) -> String {
        "constant".into()
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, lba: u64, size: u64) -> Result<u64> {
        check_request(self.capacity, lba, size)?;
        self.clock_us += self.read_us;
        Ok(self.read_us)
    }

    fn write(&mut self, lba: u64, data: &[u8]) -> Result<u64> {
        check_request(self.capacity, lba, data.len() as u64)?;
        self.clock_us += self.write_us;
        Ok(self.write_us)
    }

    fn now_us(&self) -> u64 {
        self.clock_us
    }

    fn idle(&mut self, us: u64) -> u64 {
        self.clock_us += us;
        0
    }

    fn is_simulated(&self) -> bool {
        true
    }
}
