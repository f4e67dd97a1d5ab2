#![no_main]

use libfuzzer_sys::fuzz_target;
use trendlab::data::parse_table;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_table(text) {
        assert!(table.distinct_doses().len() >= 2);
        for row in table.rows() {
            assert!(row.events <= row.trials && row.trials > 0);
            assert!(row.dose.is_finite() && row.dose >= 0.0);
        }
        let collapsed = table.collapse();
        assert!(collapsed.is_grouped());
        assert_eq!(collapsed.len(), table.distinct_doses().len());
    }
});
