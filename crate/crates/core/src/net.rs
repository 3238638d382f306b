//! Bit-level helpers over IP addresses and prefixes.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use ipnet::{IpNet, Ipv4Net, Ipv6Net};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("cannot cover an empty address set")]
    EmptySet,
    #[error("address set mixes IPv4 and IPv6")]
    MixedVersions,
}

/// Address width in bits: 32 for v4, 128 for v6.
pub fn bit_width(ip: IpAddr) -> u32 {
    match ip {
        IpAddr::V4(_) => 32,
        IpAddr::V6(_) => 128,
    }
}

/// Number of equal leading bits, or `None` when the families differ.
pub fn common_prefix_len(a: IpAddr, b: IpAddr) -> Option<u32> {
    match (a, b) {
        (IpAddr::V4(a), IpAddr::V4(b)) => Some((u32::from(a) ^ u32::from(b)).leading_zeros()),
        (IpAddr::V6(a), IpAddr::V6(b)) => Some((u128::from(a) ^ u128::from(b)).leading_zeros()),
        _ => None,
    }
}

/// Longest prefix that contains every address in `ips`.
///
/// For numerically sorted addresses the common prefix of the whole set equals
/// the common prefix of its minimum and maximum, so one pass suffices.
pub fn minimal_covering_cidr<I>(ips: I) -> Result<IpNet, NetError>
where
    I: IntoIterator<Item = IpAddr>,
{
    let mut iter = ips.into_iter();
    let first = iter.next().ok_or(NetError::EmptySet)?;
    let (mut lo, mut hi) = (first, first);
    for ip in iter {
        if bit_width(ip) != bit_width(first) {
            return Err(NetError::MixedVersions);
        }
        lo = lo.min(ip);
        hi = hi.max(ip);
    }
    let len = common_prefix_len(lo, hi).expect("same family checked above");
    Ok(prefix_of(lo, len as u8))
}

/// The network of `len` leading bits around `ip`, host bits cleared.
pub fn prefix_of(ip: IpAddr, len: u8) -> IpNet {
    match ip {
        IpAddr::V4(v4) => IpNet::V4(Ipv4Net::new(v4, len).expect("valid v4 prefix").trunc()),
        IpAddr::V6(v6) => IpNet::V6(Ipv6Net::new(v6, len).expect("valid v6 prefix").trunc()),
    }
}

/// Number of addresses inside `net`, saturating at `u128::MAX`.
pub fn capacity(net: &IpNet) -> u128 {
    let host_bits = u32::from(net.max_prefix_len() - net.prefix_len());
    1u128.checked_shl(host_bits).unwrap_or(u128::MAX)
}

/// The address at `offset` from the network address of `net`.
pub fn nth_address(net: &IpNet, offset: u128) -> IpAddr {
    match net {
        IpNet::V4(n) => IpAddr::V4(Ipv4Addr::from(
            u32::from(n.network()).wrapping_add(offset as u32),
        )),
        IpNet::V6(n) => IpAddr::V6(Ipv6Addr::from(u128::from(n.network()).wrapping_add(offset))),
    }
}
