//! Shared parsers for config values that cross subcommands.

use stegolab_core::channel::ChannelSpec;
use stegolab_core::corpus::MaskKind;
use stegolab_core::diffusion::SigmaMode;
use stegolab_core::error::{Error, Result};
use stegolab_core::select::RegKind;

/// `clean`, `jpeg:Q`, or `gaussian:BETA`.
pub fn parse_channel(raw: &str) -> Result<ChannelSpec> {
    let mut parts = raw.splitn(2, ':');
    let kind = parts.next().unwrap_or_default();
    let arg = parts.next();
    match (kind, arg) {
        ("clean", None) => Ok(ChannelSpec::Clean),
        ("jpeg", Some(q)) => Ok(ChannelSpec::Jpeg {
            quality: q
                .parse()
                .map_err(|_| Error::invalid(format!("bad jpeg quality {q:?}")))?,
        }),
        ("gaussian", Some(b)) => Ok(ChannelSpec::Gaussian {
            beta: b
                .parse()
                .map_err(|_| Error::invalid(format!("bad noise variance {b:?}")))?,
        }),
        _ => Err(Error::invalid(format!(
            "channel must be clean, jpeg:Q or gaussian:BETA, got {raw:?}"
        ))),
    }
}

/// `centered-rect` or `stripes:LOW:PERIOD`.
pub fn parse_mask(raw: &str) -> Result<MaskKind> {
    if raw == "centered-rect" {
        return Ok(MaskKind::CenteredRect);
    }
    if let Some(rest) = raw.strip_prefix("stripes:") {
        let mut it = rest.splitn(2, ':');
        let low = it.next().and_then(|v| v.parse().ok());
        let period = it.next().and_then(|v| v.parse().ok());
        if let (Some(low_width), Some(period)) = (low, period) {
            return Ok(MaskKind::VerticalStripes { low_width, period });
        }
    }
    Err(Error::invalid(format!(
        "mask must be centered-rect or stripes:LOW:PERIOD, got {raw:?}"
    )))
}

/// `none`, `tv:WEIGHT`, or `l1:WEIGHT`.
pub fn parse_reg(raw: &str) -> Result<(RegKind, f64)> {
    if raw == "none" {
        return Ok((RegKind::None, 0.0));
    }
    let mut it = raw.splitn(2, ':');
    let kind = it.next().unwrap_or_default();
    let weight: f64 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::invalid(format!("regularizer needs kind:weight, got {raw:?}")))?;
    match kind {
        "tv" => Ok((RegKind::TotalVariation, weight)),
        "l1" => Ok((RegKind::L1ToOriginal, weight)),
        _ => Err(Error::invalid(format!("unknown regularizer {kind:?}"))),
    }
}

/// `printed`, `conventional`, or `zero`.
pub fn parse_sigma(raw: &str) -> Result<SigmaMode> {
    match raw {
        "printed" => Ok(SigmaMode::Printed),
        "conventional" => Ok(SigmaMode::Conventional),
        "zero" => Ok(SigmaMode::Zero),
        _ => Err(Error::invalid(format!(
            "sigma must be printed, conventional or zero, got {raw:?}"
        ))),
    }
}

/// Comma-separated list of values.
pub fn parse_list<T: std::str::FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("key {key:?}: cannot parse {v:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_forms() {
        assert_eq!(parse_channel("clean").unwrap(), ChannelSpec::Clean);
        assert_eq!(parse_channel("jpeg:75").unwrap(), ChannelSpec::Jpeg { quality: 75 });
        assert!(matches!(
            parse_channel("gaussian:0.01").unwrap(),
            ChannelSpec::Gaussian { .. }
        ));
        assert!(parse_channel("webp:3").is_err());
    }

    #[test]
    fn mask_and_reg_forms() {
        assert_eq!(parse_mask("centered-rect").unwrap(), MaskKind::CenteredRect);
        assert_eq!(
            parse_mask("stripes:2:5").unwrap(),
            MaskKind::VerticalStripes { low_width: 2, period: 5 }
        );
        assert!(parse_mask("blob").is_err());
        assert_eq!(parse_reg("none").unwrap(), (RegKind::None, 0.0));
        assert_eq!(parse_reg("tv:0.5").unwrap(), (RegKind::TotalVariation, 0.5));
        assert!(parse_reg("tv").is_err());
    }
}
