#![no_main]

use libfuzzer_sys::fuzz_target;
use trendlab::data::{parse_table, Scaling};
use trendlab::glm::Link;
use trendlab::mvn::MvnOptions;
use trendlab::trendtest::{ca_test, tukey_trend_test, Alternative, TestOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(table) = parse_table(text) else { return };
    if table.len() > 12 {
        return;
    }
    if let Ok(ca) = ca_test(&table.collapse(), Alternative::TwoSided, false) {
        assert!((0.0..=1.0).contains(&ca.p_value));
    }
    let options = TestOptions { mvn: MvnOptions { tol: 1e-3, ..MvnOptions::default() }, ..TestOptions::default() };
    for link in Link::ALL {
        if let Ok(report) = tukey_trend_test(&table, link, &Scaling::ALL, &options) {
            for c in &report.components {
                assert!(c.raw_p <= c.adjusted_p + 2e-3);
                assert!(c.adjusted_p <= 1.0);
            }
        }
    }
});
