//! Raw block-device backend using direct, synchronous IO.

use std::alloc::{self, Layout};
use std::fs::{File, OpenOptions};
use std::io;
use std::ops::{Deref, DerefMut};
use std::os::unix::fs::{FileExt, FileTypeExt, OpenOptionsExt};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{check_request, BlockDevice};
use crate::error::Result;

/// Alignment satisfying direct IO on every common block device.
const ALIGN: usize = 4096;

/// Heap buffer aligned for direct IO.
pub struct AlignedBuf {
    ptr: *mut u8,
    len: usize,
}

// The buffer owns its allocation exclusively.
unsafe impl Send for AlignedBuf {}

impl AlignedBuf {
    pub fn zeroed(len: usize) -> Self {
        let layout = Layout::from_size_align(len.max(1), ALIGN).expect("valid layout");
        // SAFETY: the layout has non-zero size.
        let ptr = unsafe { alloc::alloc_zeroed(layout) };
        if ptr.is_null() {
            alloc::handle_alloc_error(layout);
        }
        AlignedBuf { ptr, len }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        let layout = Layout::from_size_align(self.len.max(1), ALIGN).unwrap();
        // SAFETY: allocated in `zeroed` with the same layout.
        unsafe { alloc::dealloc(self.ptr, layout) }
    }
}

impl Deref for AlignedBuf {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        // SAFETY: ptr is valid for len initialized bytes.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }
}

impl DerefMut for AlignedBuf {
    fn deref_mut(&mut self) -> &mut [u8] {
        // SAFETY: ptr is valid for len bytes and uniquely borrowed.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.len) }
    }
}

/// What the platform honors for a given path.
#[derive(Debug, Clone, Serialize)]
pub struct Capabilities {
    pub path: PathBuf,
    pub block_device: bool,
    pub direct_io: bool,
    pub synchronous: bool,
    pub capacity: u64,
    pub notes: Vec<String>,
}

impl Capabilities {
    pub fn usable(&self) -> bool {
        self.direct_io && self.synchronous && self.capacity > 0
    }
}

fn open_direct(path: &Path, write: bool) -> io::Result<File> {
    OpenOptions::new().read(true).write(write).custom_flags(libc::O_DIRECT | libc::O_DSYNC).open(path)
}

fn device_size(file: &File) -> io::Result<u64> {
    let meta = file.metadata()?;
    if !meta.file_type().is_block_device() {
        return Ok(meta.len());
    }
    let mut size: u64 = 0;
    // SAFETY: BLKGETSIZE64 writes one u64 through the pointer.
    let rc = unsafe { libc::ioctl(std::os::fd::AsRawFd::as_raw_fd(file), BLKGETSIZE64, &mut size as *mut u64) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(size)
}

// _IOR(0x12, 114, size_t)
const BLKGETSIZE64: libc::c_ulong = 0x8008_1272;

/// Opens `path` read-only with direct IO and performs one aligned read.
pub fn probe_capabilities(path: &Path) -> Capabilities {
    let mut caps = Capabilities {
        path: path.to_path_buf(),
        block_device: false,
        direct_io: false,
        synchronous: false,
        capacity: 0,
        notes: Vec::new(),
    };
    if let Ok(meta) = std::fs::metadata(path) {
        caps.block_device = meta.file_type().is_block_device();
    }
    let file = match open_direct(path, false) {
        Ok(f) => f,
        Err(e) => {
            caps.notes.push(format!("direct open failed: {e}"));
            return caps;
        }
    };
    caps.synchronous = true;
    match device_size(&file) {
        Ok(n) => caps.capacity = n,
        Err(e) => caps.notes.push(format!("size query failed: {e}")),
    }
    if caps.capacity >= ALIGN as u64 {
        let mut buf = AlignedBuf::zeroed(ALIGN);
        match file.read_exact_at(&mut buf, 0) {
            Ok(()) => caps.direct_io = true,
            Err(e) => caps.notes.push(format!("direct read failed: {e}")),
        }
    } else {
        caps.notes.push("device smaller than one IO".into());
    }
    if !caps.block_device {
        caps.notes.push("not a block device; results reflect the file system".into());
    }
    caps
}

pub struct RawDevice {
    path: PathBuf,
    file: File,
    capacity: u64,
    epoch: Instant,
    buf: AlignedBuf,
}

impl RawDevice {
    pub fn open(path: &Path, write: bool) -> Result<Self> {
        let file = open_direct(path, write)?;
        let capacity = device_size(&file)?;
        Ok(RawDevice { path: path.to_path_buf(), file, capacity, epoch: Instant::now(), buf: AlignedBuf::zeroed(0) })
    }
}

fn sized(buf: &mut AlignedBuf, len: usize) -> &mut [u8] {
    if buf.len < len {
        *buf = AlignedBuf::zeroed(len);
    }
    &mut buf[..len]
}

impl BlockDevice for RawDevice {
    fn id(&self) -> String {
        self.path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "raw".into())
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn read(&mut self, lba: u64, size: u64) -> Result<u64> {
        check_request(self.capacity, lba, size)?;
        let buf = sized(&mut self.buf, size as usize);
        let t = Instant::now();
        self.file.read_exact_at(buf, lba)?;
        Ok((t.elapsed().as_micros() as u64).max(1))
    }

    fn write(&mut self, lba: u64, data: &[u8]) -> Result<u64> {
        check_request(self.capacity, lba, data.len() as u64)?;
        let buf = sized(&mut self.buf, data.len());
        buf.copy_from_slice(data);
        let t = Instant::now();
        self.file.write_all_at(buf, lba)?;
        Ok((t.elapsed().as_micros() as u64).max(1))
    }

    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn idle(&mut self, us: u64) -> u64 {
        let deadline = Instant::now() + Duration::from_micros(us);
        // Sleep most of the way, then spin for precision.
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return 0;
            }
            if left > Duration::from_millis(2) {
                std::thread::sleep(left - Duration::from_millis(1));
            } else {
                std::hint::spin_loop();
            }
        }
    }

    fn is_simulated(&self) -> bool {
        false
    }

    fn open_worker(&self) -> Result<Box<dyn BlockDevice>> {
        Ok(Box::new(RawDevice {
            path: self.path.clone(),
            file: self.file.try_clone()?,
            capacity: self.capacity,
            epoch: self.epoch,
            buf: AlignedBuf::zeroed(0),
        }))
    }
}
