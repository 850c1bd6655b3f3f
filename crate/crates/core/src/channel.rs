//! Position-driven channel emulation for vehicle-to-gNB links.
//!
//! Each link is a single scalar gain refreshed every `update_period`:
//! footprint occlusion picks LoS/NLoS, an urban-macro pathloss gives the mean
//! loss, and a distance-correlated Gauss-Markov process adds shadowing.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point2, Polygon};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("3D distance {0} m is below the pathloss model validity (1 m)")]
    Domain(f64),
}

fn default_fc() -> f64 {
    3.6
}
fn default_p_ref() -> f64 {
    11.5
}
fn default_n0() -> f64 {
    -95.0
}
fn default_h_gnb() -> f64 {
    10.0
}
fn default_h_ue() -> f64 {
    1.5
}
fn default_sigma_los() -> f64 {
    4.0
}
fn default_sigma_nlos() -> f64 {
    6.0
}
fn default_d_corr() -> f64 {
    37.0
}
fn default_update_period() -> f64 {
    0.010
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Carrier frequency, GHz.
    #[serde(default = "default_fc")]
    pub fc: f64,
    /// Received power at 0 dB pathloss, dBm. Scenario calibration constant.
    #[serde(default = "default_p_ref")]
    pub p_ref: f64,
    /// Noise floor, dBm.
    #[serde(default = "default_n0")]
    pub n0: f64,
    #[serde(default = "default_h_gnb")]
    pub h_gnb: f64,
    #[serde(default = "default_h_ue")]
    pub h_ue: f64,
    #[serde(default = "default_sigma_los")]
    pub sigma_los: f64,
    #[serde(default = "default_sigma_nlos")]
    pub sigma_nlos: f64,
    /// Shadowing decorrelation distance, meters.
    #[serde(default = "default_d_corr")]
    pub d_corr: f64,
    #[serde(default = "default_update_period")]
    pub update_period: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            fc: default_fc(),
            p_ref: default_p_ref(),
            n0: default_n0(),
            h_gnb: default_h_gnb(),
            h_ue: default_h_ue(),
            sigma_los: default_sigma_los(),
            sigma_nlos: default_sigma_nlos(),
            d_corr: default_d_corr(),
            update_period: default_update_period(),
        }
    }
}

impl ChannelParams {
    pub fn sigma(&self, los: bool) -> f64 {
        if los {
            self.sigma_los
        } else {
            self.sigma_nlos
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(xy: Point2, z: f64) -> Self {
        Point3 { x: xy.x, y: xy.y, z }
    }

    pub fn xy(self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn distance(self, o: Point3) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.z - o.z).powi(2)).sqrt()
    }
}

/// Building footprint with its cached bounding box.
#[derive(Clone, Debug)]
pub struct Building {
    pub footprint: Polygon,
    pub bbox: BBox,
}

impl Building {
    pub fn new(footprint: Polygon) -> Self {
        let bbox = footprint.bbox();
        Building { footprint, bbox }
    }
}

/// Buildings are infinitely tall prisms; touching a footprint boundary blocks.
pub fn los_blocked(p1: Point3, p2: Point3, buildings: &[Building]) -> bool {
    let (a, b) = (p1.xy(), p2.xy());
    buildings
        .iter()
        .any(|bld| bld.bbox.overlaps_segment(a, b) && bld.footprint.intersects_segment(a, b))
}

/// Urban-macro pathloss (below-breakpoint LoS; NLoS clamped to at least LoS).
pub fn pathloss_db(d3d: f64, fc: f64, los: bool, h_ue: f64) -> Result<f64, ChannelError> {
    if !(d3d >= 1.0) {
        return Err(ChannelError::Domain(d3d));
    }
    let pl_los = 28.0 + 22.0 * d3d.log10() + 20.0 * fc.log10();
    if los {
        return Ok(pl_los);
    }
    let pl_nlos = 13.54 + 39.08 * d3d.log10() + 20.0 * fc.log10() - 0.6 * (h_ue - 1.5);
    Ok(pl_los.max(pl_nlos))
}

/// One Gauss-Markov shadowing update over `displacement` meters.
pub fn shadowing_step<R: Rng + ?Sized>(prev: f64, displacement: f64, sigma: f64, d_corr: f64, rng: &mut R) -> f64 {
    let rho = (-displacement / d_corr).exp();
    if rho == 1.0 {
        return prev;
    }
    let z: f64 = rng.sample(StandardNormal);
    rho * prev + (1.0 - rho * rho).sqrt() * sigma * z
}

/// Per-vehicle shadowing memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowState {
    pub value: f64,
    pub los: bool,
    pub last_pos: Point2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelSample {
    pub t: f64,
    pub veh_id: String,
    pub los: bool,
    pub d3d: f64,
    pub pl: f64,
    pub shadow: f64,
    pub rsrp: f64,
    pub snr: f64,
}

impl ChannelSample {
    /// Received power without the shadowing term.
    pub fn rsrp_shadow_free(&self) -> f64 {
        self.rsrp + self.shadow
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GnbSite {
    pub position: Point2,
    pub height: f64,
}

/// Compose occlusion, pathloss and shadowing into one sample.
///
/// The first sample of a link and every LoS/NLoS transition draw a fresh
/// stationary shadowing value with the new state's sigma.
#[allow(clippy::too_many_arguments)]
pub fn sample_channel<R: Rng + ?Sized>(
    veh_id: &str,
    veh_pos: Point2,
    gnb: &GnbSite,
    buildings: &[Building],
    params: &ChannelParams,
    shadow: &mut Option<ShadowState>,
    rng: &mut R,
    t: f64,
) -> Result<ChannelSample, ChannelError> {
    let ue = Point3::new(veh_pos, params.h_ue);
    let bs = Point3::new(gnb.position, gnb.height);
    let los = !los_blocked(bs, ue, buildings);
    let d3d = bs.distance(ue);
    let pl = pathloss_db(d3d, params.fc, los, params.h_ue)?;
    let sigma = params.sigma(los);

    let value = match *shadow {
        Some(prev) if prev.los == los => {
            let moved = prev.last_pos.distance(veh_pos);
            shadowing_step(prev.value, moved, sigma, params.d_corr, rng)
        }
        _ => {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        }
    };
    *shadow = Some(ShadowState { value, los, last_pos: veh_pos });

    let rsrp = params.p_ref - pl - value;
    Ok(ChannelSample {
        t,
        veh_id: veh_id.to_string(),
        los,
        d3d,
        pl,
        shadow: value,
        rsrp,
        snr: rsrp - params.n0,
    })
}
