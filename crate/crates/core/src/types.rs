use std::collections::BTreeSet;
use std::fmt;

/// Logical CPU number as the kernel numbers it.
pub type CoreId = u32;
/// Kernel thread id.
pub type Tid = u32;
/// Kernel process id.
pub type Pid = u32;
/// Ordered set of logical CPUs.
pub type CoreSet = BTreeSet<CoreId>;

/// Stable identifier of a monitored virtual machine.
///
/// Ordering is plain string ordering; it is used for every tie-break.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VmId(pub String);

impl VmId {
    pub fn new(id: impl Into<String>) -> Self {
        VmId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VmId {
    fn from(s: &str) -> Self {
        VmId(s.to_string())
    }
}

/// Role of a thread inside a QEMU process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreadClass {
    Vcpu,
    Emulator,
}

impl ThreadClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ThreadClass::Vcpu => "vcpu",
            ThreadClass::Emulator => "emulator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vcpu" => Some(ThreadClass::Vcpu),
            "emulator" | "emu" => Some(ThreadClass::Emulator),
            _ => None,
        }
    }
}

impl fmt::Display for ThreadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Physical core flavour on a heterogeneous host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoreType {
    Small,
    Big,
}

impl CoreType {
    pub fn as_str(self) -> &'static str {
        match self {
            CoreType::Small => "small",
            CoreType::Big => "big",
        }
    }
}

impl fmt::Display for CoreType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
