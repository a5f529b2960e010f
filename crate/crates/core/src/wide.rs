use ethnum::U256;

/// Full 256-bit product of two 128-bit magnitudes.
#[inline]
pub(crate) fn mul_u128(a: u128, b: u128) -> U256 {
    U256::from(a) * U256::from(b)
}

#[inline]
pub(crate) fn to_limbs(x: U256) -> [u64; 4] {
    let (hi, lo) = x.into_words();
    [lo as u64, (lo >> 64) as u64, hi as u64, (hi >> 64) as u64]
}

#[inline]
pub(crate) fn bit_len(x: U256) -> u32 {
    256 - x.leading_zeros()
}

/// `x >> shift` and whether any one bits were shifted out.
#[inline]
pub(crate) fn shr_sticky(x: U256, shift: u32) -> (U256, bool) {
    if shift == 0 {
        (x, false)
    } else if shift >= 256 {
        (U256::ZERO, x != U256::ZERO)
    } else {
        let dropped = x & ((U256::ONE << shift) - 1);
        (x >> shift, dropped != U256::ZERO)
    }
}

/// Narrows to at most 126 significant bits, jamming dropped bits into the
/// least significant retained bit. Returns the significand and the applied
/// shift.
#[inline]
pub(crate) fn narrow_to_u128(x: U256) -> (u128, u32) {
    let len = bit_len(x);
    if len <= 126 {
        return (x.as_u128(), 0);
    }
    let shift = len - 126;
    let (q, sticky) = shr_sticky(x, shift);
    (q.as_u128() | sticky as u128, shift)
}
