//! Local planar frame and source-to-site path geometry.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kilometres per degree of latitude on a 6371 km sphere.
pub const KM_PER_DEG_LAT: f64 = 6371.0 * std::f64::consts::PI / 180.0;

/// Distance from the frame origin beyond which the equirectangular
/// approximation is no longer trusted.
pub const FRAME_VALIDITY_KM: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    /// Kilometres below the surface; zero for stations.
    pub depth: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, depth: f64) -> Result<Self> {
        let p = Self { lat, lon, depth };
        p.validate()?;
        Ok(p)
    }

    pub fn surface(lat: f64, lon: f64) -> Result<Self> {
        Self::new(lat, lon, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::Geometry(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::Geometry(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !(self.depth.is_finite() && self.depth >= 0.0) {
            return Err(Error::Geometry(format!("depth {} must be >= 0", self.depth)));
        }
        Ok(())
    }
}

/// Equirectangular projection about `origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFrame {
    pub origin: GeoPoint,
    pub km_per_deg_lat: f64,
    pub km_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            km_per_deg_lat: KM_PER_DEG_LAT,
            km_per_deg_lon: KM_PER_DEG_LAT * origin.lat.to_radians().cos(),
        }
    }

    /// Frame centred on the bounding box of `points`; the (0, 0) frame when
    /// there are none.
    pub fn centered_on<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Self {
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            lat = (lat.0.min(p.lat), lat.1.max(p.lat));
            lon = (lon.0.min(p.lon), lon.1.max(p.lon));
        }
        let origin = if lat.0.is_finite() {
            GeoPoint {
                lat: 0.5 * (lat.0 + lat.1),
                lon: 0.5 * (lon.0 + lon.1),
                depth: 0.0,
            }
        } else {
            GeoPoint {
                lat: 0.0,
                lon: 0.0,
                depth: 0.0,
            }
        };
        Self::new(origin)
    }

    pub fn project(&self, p: &GeoPoint) -> [f64; 2] {
        [
            (p.lon - self.origin.lon) * self.km_per_deg_lon,
            (p.lat - self.origin.lat) * self.km_per_deg_lat,
        ]
    }

    pub fn unproject(&self, xy: [f64; 2], depth: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + xy[1] / self.km_per_deg_lat,
            lon: self.origin.lon + xy[0] / self.km_per_deg_lon,
            depth,
        }
    }

    pub fn contains(&self, xy: [f64; 2]) -> bool {
        xy[0].hypot(xy[1]) < FRAME_VALIDITY_KM
    }
}

pub fn project(frame: &LocalFrame, p: &GeoPoint) -> [f64; 2] {
    frame.project(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathGeometry {
    pub event_xy: [f64; 2],
    pub station_xy: [f64; 2],
    pub event_depth: f64,
    /// Hypocentral distance (point-source rupture distance), km.
    pub r_rup: f64,
    /// Source-to-site bearing, degrees clockwise from north in [0, 360).
    pub azimuth: f64,
}

impl PathGeometry {
    /// Geometry from already-projected coordinates.
    pub fn from_xy(event_xy: [f64; 2], event_depth: f64, station_xy: [f64; 2]) -> Result<Self> {
        let dx = station_xy[0] - event_xy[0];
        let dy = station_xy[1] - event_xy[1];
        let horizontal = dx.hypot(dy);
        if horizontal == 0.0 && event_depth == 0.0 {
            return Err(Error::Geometry(
                "event and station coincide at the surface; azimuth undefined".into(),
            ));
        }
        let mut azimuth = dx.atan2(dy).to_degrees();
        if azimuth < 0.0 {
            azimuth += 360.0;
        }
        if azimuth >= 360.0 {
            azimuth -= 360.0;
        }
        Ok(Self {
            event_xy,
            station_xy,
            event_depth,
            r_rup: horizontal.hypot(event_depth),
            azimuth,
        })
    }
}

pub fn path_geometry(frame: &LocalFrame, event: &GeoPoint, station: &GeoPoint) -> Result<PathGeometry> {
    let e = frame.project(event);
    let s = frame.project(station);
    if !frame.contains(e) || !frame.contains(s) {
        return Err(Error::Geometry(format!(
            "point farther than {FRAME_VALIDITY_KM} km from frame origin ({:.4}, {:.4})",
            frame.origin.lat, frame.origin.lon
        )));
    }
    PathGeometry::from_xy(e, event.depth, s)
}

/// The three path differences entering the covariance kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathDeltas {
    pub d_r: f64,
    pub d_az: f64,
    pub d_ss: f64,
}

/// Wrapped absolute difference of two bearings, in [0, 180].
pub fn azimuth_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

pub fn path_deltas(a: &PathGeometry, b: &PathGeometry) -> PathDeltas {
    PathDeltas {
        d_r: (a.r_rup - b.r_rup).abs(),
        d_az: azimuth_difference(a.azimuth, b.azimuth),
        d_ss: (a.station_xy[0] - b.station_xy[0]).hypot(a.station_xy[1] - b.station_xy[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPoint::surface(37.0, -122.0).unwrap())
    }

    fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let r = 6371.0;
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dp = p2 - p1;
        let dl = (b.lon - a.lon).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * r * h.sqrt().asin()
    }

    #[test]
    fn projection_examples() {
        let f = frame();
        assert_eq!(f.project(&GeoPoint::surface(37.0, -122.0).unwrap()), [0.0, 0.0]);
        let north = f.project(&GeoPoint::surface(38.0, -122.0).unwrap());
        assert_eq!(north[0], 0.0);
        assert!((north[1] - 111.2).abs() < 0.01);
        let p = GeoPoint::surface(37.0, -121.0).unwrap();
        let east = f.project(&p);
        assert!((east[0] - 88.8).abs() < 0.05);
        assert_eq!(east[1], 0.0);
        let oracle = haversine_km(&f.origin, &p);
        assert!(((east[0] - oracle) / oracle).abs() < 0.005, "{} vs {oracle}", east[0]);
    }

    #[test]
    fn six_eight_ten_path() {
        let f = frame();
        let ev = GeoPoint::new(37.0, -122.0, 8.0).unwrap();
        let st = f.unproject([0.0, 6.0], 0.0);
        let g = path_geometry(&f, &ev, &st).unwrap();
        assert!((g.r_rup - 10.0).abs() < 1e-9);
        assert!(g.azimuth.abs() < 1e-9);
    }

    #[test]
    fn due_east_is_ninety() {
        let g = PathGeometry::from_xy([0.0, 0.0], 0.0, [5.0, 0.0]).unwrap();
        assert!((g.azimuth - 90.0).abs() < 1e-12);
        let w = PathGeometry::from_xy([0.0, 0.0], 0.0, [-5.0, 0.0]).unwrap();
        assert!((w.azimuth - 270.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_surface_points_rejected() {
        assert!(PathGeometry::from_xy([1.0, 1.0], 0.0, [1.0, 1.0]).is_err());
        assert!(PathGeometry::from_xy([1.0, 1.0], 3.0, [1.0, 1.0]).is_ok());
    }

    #[test]
    fn out_of_frame_rejected() {
        let f = frame();
        let far = GeoPoint::surface(41.0, -122.0).unwrap();
        let ev = GeoPoint::new(37.0, -122.0, 5.0).unwrap();
        assert!(matches!(path_geometry(&f, &ev, &far), Err(Error::Geometry(_))));
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(GeoPoint::new(91.0, 0.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 0.0, -1.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn delta_examples() {
        let a = PathGeometry::from_xy([0.0, 0.0], 5.0, [0.0, 0.0]).unwrap();
        let d = path_deltas(&a, &a);
        assert_eq!((d.d_r, d.d_az, d.d_ss), (0.0, 0.0, 0.0));
        assert!((azimuth_difference(350.0, 10.0) - 20.0).abs() < 1e-12);
        let s1 = PathGeometry::from_xy([10.0, 10.0], 5.0, [0.0, 0.0]).unwrap();
        let s2 = PathGeometry::from_xy([10.0, 10.0], 5.0, [3.0, 4.0]).unwrap();
        assert!((path_deltas(&s1, &s2).d_ss - 5.0).abs() < 1e-12);
    }

    #[test]
    fn berkeley_depth_bounds_distance() {
        let f = frame();
        let ev = GeoPoint::new(37.87, -122.25, 8.0).unwrap();
        for i in 0..20 {
            let st = f.unproject([-40.0 + 4.0 * i as f64, 15.0 - 1.5 * i as f64], 0.0);
            assert!(path_geometry(&f, &ev, &st).unwrap().r_rup >= 8.0);
        }
    }

    fn geom() -> impl Strategy<Value = PathGeometry> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..20.0f64, -100.0..100.0f64, -100.0..100.0f64)
            .prop_map(|(ex, ey, d, sx, sy)| PathGeometry::from_xy([ex, ey], d, [sx, sy]).unwrap())
    }

    proptest! {
        #[test]
        fn deltas_symmetric_and_bounded(a in geom(), b in geom()) {
            let ab = path_deltas(&a, &b);
            let ba = path_deltas(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=180.0).contains(&ab.d_az));
            prop_assert!(ab.d_r >= 0.0 && ab.d_ss >= 0.0);
            prop_assert!(a.r_rup >= a.event_depth);
            prop_assert!((0.0..360.0).contains(&a.azimuth));
        }

        #[test]
        fn projection_inverts(lat in 35.0..39.0f64, lon in -124.0..-120.0f64) {
            let f = frame();
            let p = GeoPoint::surface(lat, lon).unwrap();
            let back = f.unproject(f.project(&p), 0.0);
            prop_assert!((back.lat - lat).abs() < 1e-9);
            prop_assert!((back.lon - lon).abs() < 1e-9);
        }
    }
}
