use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Indoor environment class, ordered from most to least cluttered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Environment {
    Lab,
    NarrowCorridor,
    Lobby,
    SportsHall,
}

impl Environment {
    pub const ALL: [Environment; 4] = [
        Environment::Lab,
        Environment::NarrowCorridor,
        Environment::Lobby,
        Environment::SportsHall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Environment::Lab => "Lab",
            Environment::NarrowCorridor => "NarrowCorridor",
            Environment::Lobby => "Lobby",
            Environment::SportsHall => "SportsHall",
        }
    }

    /// Stable small integer, used for hashing and the C ABI.
    pub fn index(self) -> usize {
        match self {
            Environment::Lab => 0,
            Environment::NarrowCorridor => 1,
            Environment::Lobby => 2,
            Environment::SportsHall => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Environment> {
        Environment::ALL.get(i).copied()
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "lab" | "laboratory" => Ok(Environment::Lab),
            "narrowcorridor" | "corridor" => Ok(Environment::NarrowCorridor),
            "lobby" | "mainlobby" => Ok(Environment::Lobby),
            "sportshall" => Ok(Environment::SportsHall),
            _ => Err(Error::data(format!("unknown environment label '{s}'"))),
        }
    }
}

/// A planar point in centimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}
