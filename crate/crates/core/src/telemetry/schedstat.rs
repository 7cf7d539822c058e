use std::fmt;
use std::ops::{Add, AddAssign};

use super::TelemetryError;

/// One reading of `/proc/<pid>/task/<tid>/schedstat`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RawSchedstat {
    /// Time spent on the cpu (ns).
    pub cpu_time_ns: u64,
    /// Time spent runnable but waiting on a run queue (ns).
    pub run_delay_ns: u64,
    /// Number of timeslices run.
    pub timeslices: u64,
}

impl RawSchedstat {
    pub fn new(cpu_time_ns: u64, run_delay_ns: u64, timeslices: u64) -> Self {
        RawSchedstat {
            cpu_time_ns,
            run_delay_ns,
            timeslices,
        }
    }

    /// True when any cumulative counter went backwards relative to `prev`.
    pub fn regressed_from(&self, prev: &RawSchedstat) -> bool {
        self.cpu_time_ns < prev.cpu_time_ns
            || self.run_delay_ns < prev.run_delay_ns
            || self.timeslices < prev.timeslices
    }

    /// Field-wise difference; callers check [`regressed_from`](Self::regressed_from) first.
    pub fn saturating_sub(&self, prev: &RawSchedstat) -> RawSchedstat {
        RawSchedstat {
            cpu_time_ns: self.cpu_time_ns.saturating_sub(prev.cpu_time_ns),
            run_delay_ns: self.run_delay_ns.saturating_sub(prev.run_delay_ns),
            timeslices: self.timeslices.saturating_sub(prev.timeslices),
        }
    }
}

impl Add for RawSchedstat {
    type Output = RawSchedstat;

    fn add(self, rhs: RawSchedstat) -> RawSchedstat {
        RawSchedstat {
            cpu_time_ns: self.cpu_time_ns + rhs.cpu_time_ns,
            run_delay_ns: self.run_delay_ns + rhs.run_delay_ns,
            timeslices: self.timeslices + rhs.timeslices,
        }
    }
}

impl AddAssign for RawSchedstat {
    fn add_assign(&mut self, rhs: RawSchedstat) {
        *self = *self + rhs;
    }
}

/// Kernel text form, without the trailing newline.
impl fmt::Display for RawSchedstat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.cpu_time_ns, self.run_delay_ns, self.timeslices
        )
    }
}

/// Parses a schedstat line: three whitespace-separated decimal integers.
pub fn parse_schedstat(text: &str) -> Result<RawSchedstat, TelemetryError> {
    let malformed = || TelemetryError::MalformedSchedstat(text.trim_end().to_string());
    let mut fields = text.split_whitespace();
    let mut next = || -> Result<u64, TelemetryError> {
        let field = fields.next().ok_or_else(malformed)?;
        if !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        field.parse().map_err(|_| malformed())
    };
    let cpu_time_ns = next()?;
    let run_delay_ns = next()?;
    let timeslices = next()?;
    Ok(RawSchedstat {
        cpu_time_ns,
        run_delay_ns,
        timeslices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_fields() {
        assert_eq!(
            parse_schedstat("123456789 987654 1200").unwrap(),
            RawSchedstat::new(123456789, 987654, 1200)
        );
        assert_eq!(parse_schedstat("0 0 0\n").unwrap(), RawSchedstat::default());
        assert_eq!(
            parse_schedstat("297751702229 1936831953 8028005\n").unwrap(),
            RawSchedstat::new(297751702229, 1936831953, 8028005)
        );
    }

    #[test]
    fn rejects_short_or_non_numeric() {
        assert!(matches!(
            parse_schedstat("12 34"),
            Err(TelemetryError::MalformedSchedstat(_))
        ));
        assert!(parse_schedstat("").is_err());
        assert!(parse_schedstat("1 x 3").is_err());
        assert!(parse_schedstat("1 -2 3").is_err());
        assert!(parse_schedstat("1 2 99999999999999999999999").is_err());
    }

    #[test]
    fn regression_detection() {
        let a = RawSchedstat::new(10, 5, 1);
        assert!(!a.regressed_from(&a));
        assert!(RawSchedstat::new(9, 6, 2).regressed_from(&a));
        assert!(RawSchedstat::new(11, 4, 2).regressed_from(&a));
        assert_eq!(
            RawSchedstat::new(15, 7, 3).saturating_sub(&a),
            RawSchedstat::new(5, 2, 2)
        );
    }
}
