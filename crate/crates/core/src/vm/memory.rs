// SPDX-License-Identifier: Apache-2.0

//! Two-world address map and the SAU/MPU-style permission model.

use thiserror::Error;

pub const PMEM_BASE: u32 = 0x0_0000;
pub const PMEM_CAPACITY: u32 = 16 * 1024;
/// Memory-mapped NS-MPU control word. Writes of bit 0 toggle the program
/// memory write flag, bit 1 toggles data execute; only honored while the
/// map is reconfigurable from the Non-Secure World.
pub const MPU_CTRL: u32 = 0x0_7F00;
pub const NSC_BASE: u32 = 0x0_8000;
pub const NSC_SIZE: u32 = 0x100;
pub const DMEM_BASE: u32 = 0x1_0000;
pub const DMEM_SIZE: u32 = 8 * 1024;
pub const SECURE_BASE: u32 = 0x2_0000;
pub const SECURE_SIZE: u32 = 64 * 1024;
pub const RETAINED_BASE: u32 = 0x3_0000;
pub const RETAINED_SIZE: u32 = 64 * 1024;

pub const STACK_TOP: u32 = DMEM_BASE + DMEM_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum World {
    Secure,
    NonSecure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Allowed,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionId {
    Pmem,
    MpuCtrl,
    Nsc,
    Dmem,
    Secure,
    Retained,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: RegionId,
    pub base: u32,
    pub len: u32,
    pub readable: bool,
    pub writable: bool,
    pub executable: bool,
    pub owner: World,
}

impl Region {
    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr - self.base < self.len
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("address {0:#x} is outside every mapped region")]
    UnmappedAddress(u32),
    #[error("operation requires the Secure World")]
    WorldViolation,
    #[error("permission map is locked against Non-Secure reconfiguration")]
    Locked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionMap {
    regions: Vec<Region>,
    pub reconfigurable_by_ns: bool,
}

impl PermissionMap {
    /// Reset-state map: program memory is writable, data memory executable,
    /// and the Non-Secure World may reconfigure both.
    pub fn new(pmem_len: u32) -> Self {
        let ns = |id, base, len, w, x| Region {
            id,
            base,
            len,
            readable: true,
            writable: w,
            executable: x,
            owner: World::NonSecure,
        };
        let sec = |id, base, len, x| Region {
            id,
            base,
            len,
            readable: true,
            writable: true,
            executable: x,
            owner: World::Secure,
        };
        PermissionMap {
            regions: vec![
                ns(RegionId::Pmem, PMEM_BASE, pmem_len, true, true),
                Region { readable: false, ..ns(RegionId::MpuCtrl, MPU_CTRL, 4, true, false) },
                sec(RegionId::Nsc, NSC_BASE, NSC_SIZE, true),
                ns(RegionId::Dmem, DMEM_BASE, DMEM_SIZE, true, true),
                sec(RegionId::Secure, SECURE_BASE, SECURE_SIZE, false),
                sec(RegionId::Retained, RETAINED_BASE, RETAINED_SIZE, false),
            ],
            reconfigurable_by_ns: true,
        }
    }

    pub fn region(&self, id: RegionId) -> &Region {
        self.regions.iter().find(|r| r.id == id).expect("region present")
    }

    fn region_mut(&mut self, id: RegionId) -> &mut Region {
        self.regions.iter_mut().find(|r| r.id == id).expect("region present")
    }

    pub fn region_of(&self, addr: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    pub fn set_pmem_len(&mut self, len: u32) {
        self.region_mut(RegionId::Pmem).len = len;
    }

    pub fn check_access(&self, addr: u32, kind: AccessKind, world: World) -> Result<Access, MemoryError> {
        let region = self.region_of(addr).ok_or(MemoryError::UnmappedAddress(addr))?;
        if world == World::Secure {
            return Ok(Access::Allowed);
        }
        if region.owner == World::Secure {
            return Ok(Access::Violation);
        }
        if region.id == RegionId::MpuCtrl && kind == AccessKind::Write && !self.reconfigurable_by_ns {
            return Ok(Access::Violation);
        }
        let flag = match kind {
            AccessKind::Read => region.readable,
            AccessKind::Write => region.writable,
            AccessKind::Execute => region.executable,
        };
        Ok(if flag { Access::Allowed } else { Access::Violation })
    }

    /// Flag update requested by `world`. Non-Secure requests are refused
    /// once reconfiguration has been revoked.
    pub fn set_flags(
        &mut self,
        id: RegionId,
        writable: Option<bool>,
        executable: Option<bool>,
        world: World,
    ) -> Result<(), MemoryError> {
        if world == World::NonSecure && !self.reconfigurable_by_ns {
            return Err(MemoryError::Locked);
        }
        let r = self.region_mut(id);
        if let Some(w) = writable {
            r.writable = w;
        }
        if let Some(x) = executable {
            r.executable = x;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secure_region_isolated_from_ns() {
        let pm = PermissionMap::new(64);
        assert_eq!(pm.check_access(SECURE_BASE + 4, AccessKind::Read, World::NonSecure), Ok(Access::Violation));
        assert_eq!(pm.check_access(RETAINED_BASE, AccessKind::Write, World::NonSecure), Ok(Access::Violation));
        assert_eq!(pm.check_access(SECURE_BASE + 4, AccessKind::Read, World::Secure), Ok(Access::Allowed));
    }

    #[test]
    fn pmem_execute_allowed() {
        let pm = PermissionMap::new(64);
        assert_eq!(pm.check_access(0, AccessKind::Execute, World::NonSecure), Ok(Access::Allowed));
    }

    #[test]
    fn unmapped() {
        let pm = PermissionMap::new(64);
        assert_eq!(
            pm.check_access(0x5_0000, AccessKind::Read, World::NonSecure),
            Err(MemoryError::UnmappedAddress(0x5_0000))
        );
        // Past the loaded program image.
        assert!(pm.check_access(64, AccessKind::Execute, World::NonSecure).is_err());
    }

    #[test]
    fn ns_cannot_reconfigure_after_revocation() {
        let mut pm = PermissionMap::new(64);
        pm.set_flags(RegionId::Pmem, Some(false), None, World::Secure).unwrap();
        pm.reconfigurable_by_ns = false;
        assert_eq!(pm.set_flags(RegionId::Pmem, Some(true), None, World::NonSecure), Err(MemoryError::Locked));
        assert_eq!(pm.check_access(MPU_CTRL, AccessKind::Write, World::NonSecure), Ok(Access::Violation));
        assert_eq!(pm.check_access(0, AccessKind::Write, World::NonSecure), Ok(Access::Violation));
    }
}
