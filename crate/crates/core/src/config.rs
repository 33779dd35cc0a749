//! Simulation configuration: a flat `key = value` text format.
//!
//! Lines starting with `#` and blank lines are ignored; unknown or repeated
//! keys are errors. Keys not given keep the desk-scale defaults of
//! [`SimConfig::default`].
//!
//! | key           | meaning                                             |
//! |---------------|-----------------------------------------------------|
//! | `M`           | number of subcarriers                               |
//! | `M_u`         | used subcarriers, centred in the band               |
//! | `K`           | overlapping factor, `L_p = K M + 1`                 |
//! | `rolloff`     | RRC roll-off of the prototype, in (0, 1]            |
//! | `Q`           | QAM order (4, 16, 64)                               |
//! | `L_f`, `L_b`  | DFE feed-forward / feedback lengths                 |
//! | `L_lin`       | linear equalizer length                             |
//! | `nu`          | latency in half-symbols, or `auto`                  |
//! | `tau`         | modulo constant, or `auto` (`2 sqrt(Q) a`)          |
//! | `f_s`         | sample rate in Hz                                   |
//! | `L_ch`        | channel length in samples                           |
//! | `profile`     | `bu` or `flat`                                      |
//! | `ebn0`        | `a,b,c` list or `start:step:stop` range in dB       |
//! | `B`           | block length in complex symbols per subcarrier      |
//! | `channels`    | channel realizations per grid point                 |
//! | `seed`        | master seed                                         |
//! | `designs`     | comma-separated subset of [`Design::ALL`]           |
//! | `out`         | CSV output path                                     |
//! | `nu_ref_ebn0` | Eb/N0 (dB) at which `nu = auto` is resolved         |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::channel::PowerDelayProfile;
use crate::error::{Error, Result};
use crate::oqam::Qam;
use crate::thp::Duality;

/// Transceiver variants compared by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Design {
    /// UL linear MMSE equalizer.
    LinearUl,
    /// DL linear precoder from the Sum-MSE transform.
    LinearDlSum,
    /// DL linear precoder from the SC-MSE transform.
    LinearDlSc,
    /// UL MMSE decision-feedback equalizer.
    DfeUl,
    /// DL THP from the Sum-MSE transform.
    ThpSum,
    /// DL THP from the SC-MSE transform.
    ThpSc,
}

impl Design {
    pub const ALL: [Design; 6] = [
        Design::LinearUl,
        Design::LinearDlSum,
        Design::LinearDlSc,
        Design::DfeUl,
        Design::ThpSum,
        Design::ThpSc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::LinearUl => "linear-ul",
            Design::LinearDlSum => "linear-dl-sum",
            Design::LinearDlSc => "linear-dl-sc",
            Design::DfeUl => "dfe-ul",
            Design::ThpSum => "thp-sum",
            Design::ThpSc => "thp-sc",
        }
    }

    /// `true` for the designs without feedback.
    pub fn is_linear(self) -> bool {
        matches!(self, Design::LinearUl | Design::LinearDlSum | Design::LinearDlSc)
    }

    /// The duality transform of a DL design; `None` for UL designs.
    pub fn duality(self) -> Option<Duality> {
        match self {
            Design::LinearDlSum | Design::ThpSum => Some(Duality::SumMse),
            Design::LinearDlSc | Design::ThpSc => Some(Duality::SubcarrierMse),
            Design::LinearUl | Design::DfeUl => None,
        }
    }

    pub fn is_downlink(self) -> bool {
        self.duality().is_some()
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Design::ALL
            .into_iter()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown design `{s}`")))
    }
}

/// Parses a comma-separated design list.
pub fn parse_designs(s: &str) -> Result<Vec<Design>> {
    let designs = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if designs.is_empty() {
        return Err(Error::Config("empty design list".into()));
    }
    Ok(designs)
}

/// Latency setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latency {
    /// Chosen per design family on channel 0 by minimum mean UL MSE.
    Auto,
    Fixed(usize),
}

/// Channel power-delay profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    BadUrban,
    Flat,
}

impl Profile {
    pub fn power_delay_profile(self) -> PowerDelayProfile {
        match self {
            Profile::BadUrban => PowerDelayProfile::bad_urban(),
            Profile::Flat => PowerDelayProfile::flat(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Profile::BadUrban => "bu",
            Profile::Flat => "flat",
        }
    }
}

/// Simulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub m: usize,
    pub m_u: usize,
    pub overlap: usize,
    pub rolloff: f64,
    pub q: usize,
    pub l_f: usize,
    pub l_b: usize,
    pub l_lin: usize,
    pub nu: Latency,
    /// `None` selects the constellation's modulo constant.
    pub tau: Option<f64>,
    pub sample_rate: f64,
    pub l_ch: usize,
    pub profile: Profile,
    pub ebn0_db: Vec<f64>,
    pub block_len: usize,
    pub channels: usize,
    pub seed: u64,
    pub designs: Vec<Design>,
    pub out: PathBuf,
    pub nu_ref_ebn0_db: f64,
}

impl Default for SimConfig {
    /// Desk scale: 64 subcarriers with the subcarrier spacing of the
    /// 256-subcarrier reference at 15.36 MHz.
    fn default() -> Self {
        Self {
            m: 64,
            m_u: 48,
            overlap: 4,
            rolloff: 1.0,
            q: 16,
            l_f: 7,
            l_b: 4,
            l_lin: 9,
            nu: Latency::Auto,
            tau: None,
            sample_rate: 3.84e6,
            l_ch: 28,
            profile: Profile::BadUrban,
            ebn0_db: (0..=6).map(|i| 5.0 * i as f64).collect(),
            block_len: 500,
            channels: 50,
            seed: 1,
            designs: Design::ALL.to_vec(),
            out: PathBuf::from("results.csv"),
            nu_ref_ebn0_db: 15.0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

/// Parses `a,b,c` or `start:step:stop` (inclusive, tolerant to rounding).
pub fn parse_grid(v: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let grid = match parts.as_slice() {
        [start, step, stop] => {
            let (a, s, b): (f64, f64, f64) =
                (parse_num("ebn0", start)?, parse_num("ebn0", step)?, parse_num("ebn0", stop)?);
            if !(s > 0.0) || b < a {
                return Err(Error::Config(format!("`ebn0`: bad range `{v}`")));
            }
            let n = ((b - a) / s + 1e-9).floor() as usize;
            (0..=n).map(|i| a + s * i as f64).collect()
        }
        [list] => list
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| parse_num("ebn0", t.trim()))
            .collect::<Result<Vec<f64>>>()?,
        _ => return Err(Error::Config(format!("`ebn0`: bad grid `{v}`"))),
    };
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("`ebn0`: values must be finite".into()));
    }
    Ok(grid)
}

impl SimConfig {
    /// Parameters of the reference study: 210 of 256 subcarriers at
    /// 15.36 MHz, 110-sample channels, 1000 symbols, 200 channels.
    pub fn reference() -> Self {
        Self {
            m: 256,
            m_u: 210,
            sample_rate: 15.36e6,
            l_ch: 110,
            block_len: 1000,
            channels: 200,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "M" => self.m = parse_num(key, v)?,
            "M_u" => self.m_u = parse_num(key, v)?,
            "K" => self.overlap = parse_num(key, v)?,
            "rolloff" => self.rolloff = parse_num(key, v)?,
            "Q" => self.q = parse_num(key, v)?,
            "L_f" => self.l_f = parse_num(key, v)?,
            "L_b" => self.l_b = parse_num(key, v)?,
            "L_lin" => self.l_lin = parse_num(key, v)?,
            "nu" => {
                self.nu = if v == "auto" {
                    Latency::Auto
                } else {
                    Latency::Fixed(parse_num(key, v)?)
                }
            }
            "tau" => self.tau = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "f_s" => self.sample_rate = parse_num(key, v)?,
            "L_ch" => self.l_ch = parse_num(key, v)?,
            "profile" => {
                self.profile = match v {
                    "bu" => Profile::BadUrban,
                    "flat" => Profile::Flat,
                    _ => return Err(Error::Config(format!("unknown profile `{v}`"))),
                }
            }
            "ebn0" => self.ebn0_db = parse_grid(v)?,
            "B" => self.block_len = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "designs" => self.designs = parse_designs(v)?,
            "out" => self.out = PathBuf::from(v),
            "nu_ref_ebn0" => self.nu_ref_ebn0_db = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m < 2 || self.m % 2 != 0 {
            return bad(format!("M = {} must be even and >= 2", self.m));
        }
        if self.m_u == 0 || self.m_u > self.m {
            return bad(format!("M_u = {} must be in 1..={}", self.m_u, self.m));
        }
        if self.overlap == 0 || self.l_f == 0 || self.l_lin == 0 || self.l_ch == 0 {
            return bad("K, L_f, L_lin and L_ch must be >= 1".into());
        }
        if self.block_len == 0 || self.channels == 0 {
            return bad("B and channels must be >= 1".into());
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return bad(format!("rolloff = {} outside (0, 1]", self.rolloff));
        }
        if !(self.sample_rate > 0.0) {
            return bad("f_s must be positive".into());
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return bad("tau must be positive".into());
            }
        }
        if self.ebn0_db.is_empty() {
            return bad("empty Eb/N0 grid".into());
        }
        if self.designs.is_empty() {
            return bad("empty design list".into());
        }
        Qam::new(self.q)?;
        Ok(())
    }

    pub fn qam(&self) -> Result<Qam> {
        Qam::new(self.q)
    }

    /// Modulo constant in use.
    pub fn tau_value(&self) -> Result<f64> {
        Ok(self.tau.unwrap_or(self.qam()?.modulo_constant()))
    }

    /// First used (absolute) subcarrier; the used band is centred.
    pub fn first_subcarrier(&self) -> usize {
        (self.m - self.m_u) / 2
    }

    /// Prototype length `K M + 1`.
    pub fn prototype_len(&self) -> usize {
        self.overlap * self.m + 1
    }

    /// Half-symbols excluded from counting at each end of a block:
    /// `ceil(2 (L_p - 1) / (M/2))` plus the longest feed-forward filter.
    pub fn transient(&self) -> usize {
        (2 * (self.prototype_len() - 1)).div_ceil(self.m / 2) + self.l_f.max(self.l_lin)
    }

    /// `key=value` lines that [`SimConfig::parse`] reads back to `self`.
    pub fn echo(&self) -> Vec<String> {
        let grid: Vec<String> = self.ebn0_db.iter().map(|x| x.to_string()).collect();
        let designs: Vec<&str> = self.designs.iter().map(|d| d.name()).collect();
        vec![
            format!("M={}", self.m),
            format!("M_u={}", self.m_u),
            format!("K={}", self.overlap),
            format!("rolloff={}", self.rolloff),
            format!("Q={}", self.q),
            format!("L_f={}", self.l_f),
            format!("L_b={}", self.l_b),
            format!("L_lin={}", self.l_lin),
            match self.nu {
                Latency::Auto => "nu=auto".to_string(),
                Latency::Fixed(n) => format!("nu={n}"),
            },
            self.tau.map_or("tau=auto".to_string(), |t| format!("tau={t}")),
            format!("f_s={}", self.sample_rate),
            format!("L_ch={}", self.l_ch),
            format!("profile={}", self.profile.name()),
            format!("ebn0={}", grid.join(",")),
            format!("B={}", self.block_len),
            format!("channels={}", self.channels),
            format!("seed={}", self.seed),
            format!("designs={}", designs.join(",")),
            format!("out={}", self.out.display()),
            format!("nu_ref_ebn0={}", self.nu_ref_ebn0_db),
        ]
    }
}
