//! WGS-84 conversions and local east/north/up geometry.

pub type Ecef = [f64; 3];

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

pub fn sub(a: &Ecef, b: &Ecef) -> Ecef {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: &Ecef) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: &Ecef, b: &Ecef) -> f64 {
    norm(&sub(a, b))
}

/// Geodetic latitude/longitude (degrees) and ellipsoidal height (m) to ECEF.
pub fn geodetic_to_ecef(lat_deg: f64, lon_deg: f64, height: f64) -> Ecef {
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    let n = WGS84_A / (1.0 - WGS84_E2 * lat.sin().powi(2)).sqrt();
    [
        (n + height) * lat.cos() * lon.cos(),
        (n + height) * lat.cos() * lon.sin(),
        (n * (1.0 - WGS84_E2) + height) * lat.sin(),
    ]
}

/// ECEF to geodetic (degrees, degrees, m), fixed-point iteration on latitude.
pub fn ecef_to_geodetic(p: &Ecef) -> (f64, f64, f64) {
    let lon = p[1].atan2(p[0]);
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let mut lat = p[2].atan2(r * (1.0 - WGS84_E2));
    let mut h = 0.0;
    for _ in 0..10 {
        let n = WGS84_A / (1.0 - WGS84_E2 * lat.sin().powi(2)).sqrt();
        h = r / lat.cos() - n;
        lat = p[2].atan2(r * (1.0 - WGS84_E2 * n / (n + h)));
    }
    (lat.to_degrees(), lon.to_degrees(), h)
}

/// Rows are the east, north and up unit vectors at `origin`, in ECEF.
pub fn enu_basis(origin: &Ecef) -> [Ecef; 3] {
    let (lat, lon, _) = ecef_to_geodetic(origin);
    let (lat, lon) = (lat.to_radians(), lon.to_radians());
    [
        [-lon.sin(), lon.cos(), 0.0],
        [-lat.sin() * lon.cos(), -lat.sin() * lon.sin(), lat.cos()],
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()],
    ]
}

/// ECEF offset expressed in the local frame at `origin`.
pub fn ecef_to_enu(delta: &Ecef, origin: &Ecef) -> [f64; 3] {
    let basis = enu_basis(origin);
    basis.map(|row| row[0] * delta[0] + row[1] * delta[1] + row[2] * delta[2])
}

pub fn enu_to_ecef(enu: &[f64; 3], origin: &Ecef) -> Ecef {
    let b = enu_basis(origin);
    [
        b[0][0] * enu[0] + b[1][0] * enu[1] + b[2][0] * enu[2],
        b[0][1] * enu[0] + b[1][1] * enu[1] + b[2][1] * enu[2],
        b[0][2] * enu[0] + b[1][2] * enu[1] + b[2][2] * enu[2],
    ]
}

/// Elevation and azimuth (degrees, azimuth in `[0, 360)`) of `sat` seen from
/// `receiver`.
pub fn elevation_azimuth(receiver: &Ecef, sat: &Ecef) -> (f64, f64) {
    let los = sub(sat, receiver);
    let enu = ecef_to_enu(&los, receiver);
    let horiz = (enu[0] * enu[0] + enu[1] * enu[1]).sqrt();
    let el = enu[2].atan2(horiz).to_degrees();
    let mut az = enu[0].atan2(enu[1]).to_degrees();
    if az < 0.0 {
        az += 360.0;
    }
    if az >= 360.0 {
        az -= 360.0;
    }
    (el, az)
}

/// Point at distance `radius` from the Earth's center along the line of
/// sight with the given elevation/azimuth from `receiver`.
pub fn point_on_shell(receiver: &Ecef, elevation_deg: f64, azimuth_deg: f64, radius: f64) -> Ecef {
    let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    let enu = [el.cos() * az.sin(), el.cos() * az.cos(), el.sin()];
    let u = enu_to_ecef(&enu, receiver);
    // |r + d u| = radius
    let b = 2.0 * (receiver[0] * u[0] + receiver[1] * u[1] + receiver[2] * u[2]);
    let c = norm(receiver).powi(2) - radius * radius;
    let d = (-b + (b * b - 4.0 * c).sqrt()) / 2.0;
    [receiver[0] + d * u[0], receiver[1] + d * u[1], receiver[2] + d * u[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geodetic_round_trip() {
        let p = geodetic_to_ecef(31.2, 121.5, 12.0);
        let (lat, lon, h) = ecef_to_geodetic(&p);
        assert!((lat - 31.2).abs() < 1e-9);
        assert!((lon - 121.5).abs() < 1e-9);
        assert!((h - 12.0).abs() < 1e-6);
    }

    #[test]
    fn shell_point_has_requested_direction() {
        let rx = geodetic_to_ecef(22.3, 114.2, 5.0);
        let sat = point_on_shell(&rx, 37.0, 250.0, 26_571_000.0);
        assert!((norm(&sat) - 26_571_000.0).abs() < 1e-3);
        let (el, az) = elevation_azimuth(&rx, &sat);
        assert!((el - 37.0).abs() < 1e-9);
        assert!((az - 250.0).abs() < 1e-9);
    }
}
