use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The seven weight matrices of a transformer layer, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Q,
        Role::K,
        Role::V,
        Role::O,
        Role::Gate,
        Role::Up,
        Role::Down,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Q => "Q",
            Role::K => "K",
            Role::V => "V",
            Role::O => "O",
            Role::Gate => "Gate",
            Role::Up => "Up",
            Role::Down => "Down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Role::Q | Role::K | Role::V | Role::O)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(alloc::format!("unknown role {s:?}")))
    }
}

/// One monitored weight matrix. Ordered by `(layer, role)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub role: Role,
}

impl ComponentId {
    pub fn new(layer: usize, role: Role) -> Self {
        Self { layer, role }
    }

    /// Dense index `7 * layer + role`.
    #[inline]
    pub fn index(self) -> usize {
        self.layer * Role::ALL.len() + self.role.index()
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            layer: index / Role::ALL.len(),
            role: Role::ALL[index % Role::ALL.len()],
        }
    }

    /// All `7 * n_layers` ids in canonical order.
    pub fn all(n_layers: usize) -> impl Iterator<Item = ComponentId> {
        (0..n_layers * Role::ALL.len()).map(ComponentId::from_index)
    }
}

/// Formats as `L{layer}.{role}`, e.g. `L1.Gate`.
impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.role)
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::InvalidInput(alloc::format!("malformed component id {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, role) = rest.split_once('.').ok_or_else(bad)?;
        Ok(Self {
            layer: layer.parse().map_err(|_| bad())?,
            role: role.parse()?,
        })
    }
}
