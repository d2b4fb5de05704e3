use proptest::prelude::*;

use stackprobe_core::{generate, parse_config, plan, Defaults, FuzzConfig};

const WORDS: [&str; 7] = ["nova", "add-fixed-ip", "FUZZ", "x", "--flag", "type-create", "=FUZZ="];
const CHAR_POOL: [char; 10] = ['!', '/', '0', 'A', 'z', '{', '~', '\'', ':', '@'];

/// A config source: per block, (comment lines, command words, separator).
fn config_source() -> impl Strategy<Value = (String, usize)> {
    let block = (
        prop::collection::vec("[a-zA-Z0-9 ]{0,12}", 0..3),
        prop::collection::vec(0..WORDS.len(), 0..5),
        prop_oneof![Just(" "), Just("  "), Just("\t")],
    );
    prop::collection::vec(block, 1..=5).prop_map(|blocks| {
        let n = blocks.len();
        let mut src = String::new();
        for (comments, words, sep) in blocks {
            for c in comments {
                src.push_str(&format!("# {c}\n"));
            }
            let mut cmd: Vec<&str> = words.iter().map(|&i| WORDS[i]).collect();
            if !cmd.contains(&"FUZZ") && !cmd.contains(&"=FUZZ=") {
                cmd.push("FUZZ");
            }
            src.push_str(&format!("{sep}{}\n--\n", cmd.join(sep)));
        }
        (src, n)
    })
}

fn sweep() -> impl Strategy<Value = (Vec<char>, usize)> {
    (prop::sample::subsequence(CHAR_POOL.to_vec(), 1..=4).prop_shuffle(), 1usize..=8)
}

fn config(src: &str, charset: Vec<char>, max_len: usize) -> FuzzConfig {
    parse_config("prop", src, &Defaults { charset, max_len }).expect("generated config parses")
}

/// Brute-force oracle: cases x chars x lengths with plain string replacement
/// on the whitespace-normalized command line.
fn oracle(src: &str, charset: &[char], max_len: usize) -> Vec<(usize, char, usize, String)> {
    let commands: Vec<String> = src
        .lines()
        .filter(|l| !l.starts_with('#') && l.trim() != "--" && !l.trim().is_empty())
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    let mut out = Vec::new();
    for (i, cmd) in commands.iter().enumerate() {
        for &ch in charset {
            for len in 1..=max_len {
                let fill: String = std::iter::repeat(ch).take(len).collect();
                out.push((i + 1, ch, len, cmd.replace("FUZZ", &fill)));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn generate_matches_brute_force((src, _) in config_source(), (charset, max_len) in sweep()) {
        let cfg = config(&src, charset.clone(), max_len);
        let got: Vec<_> = generate(&cfg).map(|c| (c.case_index, c.ch, c.length, c.rendered)).collect();
        prop_assert_eq!(got, oracle(&src, &charset, max_len));
    }

    #[test]
    fn count_law((src, n) in config_source(), (charset, max_len) in sweep()) {
        let cfg = config(&src, charset.clone(), max_len);
        let expected = (n * charset.len() * max_len) as u64;
        let p = plan(&cfg);
        prop_assert_eq!(p.total_count, expected);
        prop_assert_eq!(p.per_case_count, (charset.len() * max_len) as u64);
        prop_assert_eq!(generate(&cfg).len() as u64, expected);
        prop_assert_eq!(generate(&cfg).count() as u64, expected);
    }

    #[test]
    fn fuzz_string_law((src, _) in config_source(), (charset, max_len) in sweep()) {
        let cfg = config(&src, charset, max_len);
        for cmd in generate(&cfg) {
            let fuzz = cmd.fuzz_string();
            prop_assert_eq!(fuzz.chars().count(), cmd.length);
            prop_assert!(fuzz.chars().all(|c| c == cmd.ch));
            let case = &cfg.test_cases()[cmd.case_index - 1];
            prop_assert_eq!(case.template.render(&fuzz), cmd.rendered.clone());
            prop_assert_eq!(case.template.extract_uniform(&cmd.rendered), Some(fuzz.as_str()));
        }
    }

    #[test]
    fn source_round_trip((src, n) in config_source(), (charset, max_len) in sweep()) {
        let cfg = config(&src, charset, max_len);
        prop_assert_eq!(cfg.test_cases().len(), n);
        prop_assert_eq!(src.lines().filter(|l| *l == "--").count(), n);
        let text = cfg.to_source();
        let back = parse_config("prop", &text, &Defaults::standard()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn order_is_case_then_char_then_length((src, _) in config_source(), (charset, max_len) in sweep()) {
        let cfg = config(&src, charset.clone(), max_len);
        let keys: Vec<_> = generate(&cfg)
            .map(|c| (c.case_index, charset.iter().position(|&x| x == c.ch).unwrap(), c.length))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
    }
}
