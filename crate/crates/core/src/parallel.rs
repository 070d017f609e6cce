//! Deterministic fan-out over independent work items.
//!
//! Results always come back in input order regardless of worker count, so
//! parallel evaluation produces byte-identical reports. The `MNL_THREADS`
//! environment variable caps the worker count (default: all cores).

use std::sync::mpsc;

fn cap_from(raw: Option<&str>) -> usize {
    let default = || {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    };
    match raw {
        Some(v) => v.trim().parse::<usize>().ok().filter(|n| *n >= 1).unwrap_or_else(default),
        None => default(),
    }
}

/// Worker cap honoring `MNL_THREADS`; unparsable values fall back to the
/// core count.
pub fn thread_cap() -> usize {
    cap_from(std::env::var("MNL_THREADS").ok().as_deref())
}

/// Map `f` over `items` with up to [`thread_cap`] workers, returning results
/// in input order.
pub fn ordered_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let n = items.len();
    let workers = thread_cap().min(n.max(1));
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut buckets: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        buckets[i % workers].push((i, item));
    }
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for bucket in buckets {
            let tx = tx.clone();
            let f = &f;
            scope.spawn(move || {
                for (i, item) in bucket {
                    let _ = tx.send((i, f(item)));
                }
            });
        }
        drop(tx);
    });
    let mut out: Vec<Option<U>> = (0..n).map(|_| None).collect();
    for (i, u) in rx {
        out[i] = Some(u);
    }
    out.into_iter()
        .map(|u| u.expect("every index mapped"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_input_order() {
        let items: Vec<u64> = (0..257).collect();
        let out = ordered_map(items.clone(), |i| i * i);
        let expect: Vec<u64> = items.iter().map(|i| i * i).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn empty_input_yields_empty_output() {
        let out: Vec<u32> = ordered_map(Vec::<u32>::new(), |i| i);
        assert!(out.is_empty());
    }

    #[test]
    fn cap_parsing_rules() {
        assert_eq!(cap_from(Some("3")), 3);
        assert_eq!(cap_from(Some(" 8 ")), 8);
        assert!(cap_from(Some("0")) >= 1);
        assert!(cap_from(Some("not a number")) >= 1);
        assert!(cap_from(None) >= 1);
    }
}
