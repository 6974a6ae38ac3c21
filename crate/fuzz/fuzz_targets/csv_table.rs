#![no_main]

use libfuzzer_sys::fuzz_target;
use tabforge::table::Table;
use tabforge::toy::mixture_schema;

fuzz_target!(|data: &[u8]| {
    let schema = mixture_schema();
    if let Ok(table) = Table::read_csv(data, &schema) {
        let text = table.to_csv_string();
        let again = Table::read_csv(text.as_bytes(), &schema).expect("written CSV parses");
        assert_eq!(again, table);
    }
});
