#![no_main]

use libfuzzer_sys::fuzz_target;
use trendlab::data::{Scaling, ZeroDosePolicy};
use trendlab::glm::Link;
use trendlab::trendtest::{Alternative, PseudoCount, PseudoCounts};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = text.parse::<Link>();
    let _ = text.parse::<Scaling>();
    let _ = text.parse::<Alternative>();
    if let Ok(ZeroDosePolicy::Fixed(v)) = text.parse::<ZeroDosePolicy>() {
        assert!(v.is_finite() && v > 0.0);
    }
    match text.parse::<PseudoCount>() {
        Ok(PseudoCount::Always(c)) | Ok(PseudoCount::OnBoundary(c)) => assert!(c.is_finite() && c > 0.0),
        _ => {}
    }
    let _ = text.parse::<PseudoCounts>();
});
