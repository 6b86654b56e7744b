use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

pub const PSN_MODULUS: u32 = 1 << 24;
pub const PSN_MASK: u32 = PSN_MODULUS - 1;

/// 24-bit packet sequence number. All arithmetic wraps modulo 2^24.
///
/// There is deliberately no `Ord` impl: ordering is only meaningful inside
/// a window, see [`crate::psn`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Psn(u32);

impl Psn {
    pub const ZERO: Psn = Psn(0);
    pub const MAX: Psn = Psn(PSN_MASK);

    pub const fn new(value: u32) -> Self {
        Psn(value & PSN_MASK)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub const fn add(self, n: u32) -> Psn {
        Psn(self.0.wrapping_add(n) & PSN_MASK)
    }

    pub const fn sub(self, n: u32) -> Psn {
        Psn(self.0.wrapping_sub(n) & PSN_MASK)
    }

    pub const fn next(self) -> Psn {
        self.add(1)
    }

    pub const fn prev(self) -> Psn {
        self.sub(1)
    }

    /// Forward distance from `self` to `later`, i.e. `(later - self) mod 2^24`.
    pub const fn distance_to(self, later: Psn) -> u32 {
        later.0.wrapping_sub(self.0) & PSN_MASK
    }
}

impl fmt::Debug for Psn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Psn({:#08x})", self.0)
    }
}

impl fmt::Display for Psn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 24-bit queue pair number.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Qpn(u32);

/// Virtual destination QPN every multicast QP points at.
pub const MULTICAST_QPN: Qpn = Qpn(0x1);

impl Qpn {
    pub const fn new(value: u32) -> Self {
        Qpn(value & PSN_MASK)
    }

    pub fn try_new(value: u32) -> Option<Self> {
        (value <= PSN_MASK).then_some(Qpn(value))
    }

    pub const fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for Qpn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Qpn({:#x})", self.0)
    }
}

impl fmt::Display for Qpn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// An IPv4 address in 224.0.0.0/4 naming a multicast group.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Ipv4Addr", into = "Ipv4Addr")]
pub struct GroupIp(Ipv4Addr);

impl GroupIp {
    pub fn new(addr: Ipv4Addr) -> Option<Self> {
        addr.is_multicast().then_some(GroupIp(addr))
    }

    pub fn addr(self) -> Ipv4Addr {
        self.0
    }

    /// Low 24 bits of the address; used as a compact group identifier.
    pub fn group_id(self) -> u32 {
        u32::from(self.0) & PSN_MASK
    }
}

impl TryFrom<Ipv4Addr> for GroupIp {
    type Error = String;

    fn try_from(addr: Ipv4Addr) -> Result<Self, Self::Error> {
        GroupIp::new(addr).ok_or_else(|| format!("{addr} is not in 224.0.0.0/4"))
    }
}

impl From<GroupIp> for Ipv4Addr {
    fn from(g: GroupIp) -> Self {
        g.0
    }
}

impl fmt::Debug for GroupIp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupIp({})", self.0)
    }
}

impl fmt::Display for GroupIp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const BROADCAST: MacAddr = MacAddr([0xFF; 6]);
    pub const ZERO: MacAddr = MacAddr([0; 6]);

    /// Locally administered address derived from a node index.
    pub fn from_index(index: u32) -> Self {
        let b = index.to_be_bytes();
        MacAddr([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            m[0], m[1], m[2], m[3], m[4], m[5]
        )
    }
}
