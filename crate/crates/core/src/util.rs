/// Ceiling that ignores floating-point noise just above an integer, so that
/// e.g. `2 / (0.5 * (1 - 0.9))` evaluates to 40 rather than 41.
pub(crate) fn ceil_snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

pub(crate) fn ceil_snap_u64(x: f64) -> u64 {
    let c = ceil_snap(x);
    if c <= 0.0 {
        0
    } else {
        c as u64
    }
}

/// SplitMix64 finaliser.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_snap_absorbs_rounding_noise() {
        assert_eq!(ceil_snap(2.0 / (0.5 * (1.0 - 0.9))), 40.0);
        assert_eq!(ceil_snap(13.3333), 14.0);
        assert_eq!(ceil_snap(4.0), 4.0);
        assert_eq!(ceil_snap(4.000_001), 5.0);
        assert_eq!(ceil_snap_u64(-0.5), 0);
    }
}
