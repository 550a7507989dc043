use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use objseek_core::Index;

/// Upper bounds, in seconds, of the search latency histogram buckets.
pub const LATENCY_BUCKETS: [f64; 10] = [0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5];

#[derive(Debug, Default)]
pub struct Metrics {
    searches: AtomicU64,
    search_errors: AtomicU64,
    latency_micros: AtomicU64,
    buckets: [AtomicU64; LATENCY_BUCKETS.len()],
    judgments: AtomicU64,
}

impl Metrics {
    pub fn observe_search(&self, elapsed: Duration, ok: bool) {
        self.searches.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.search_errors.fetch_add(1, Ordering::Relaxed);
        }
        self.latency_micros
            .fetch_add(elapsed.as_micros() as u64, Ordering::Relaxed);
        let secs = elapsed.as_secs_f64();
        for (bound, count) in LATENCY_BUCKETS.iter().zip(&self.buckets) {
            if secs <= *bound {
                count.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn observe_judgment(&self) {
        self.judgments.fetch_add(1, Ordering::Relaxed);
    }

    /// Text exposition format.
    pub fn render(&self, index: &Index) -> String {
        let mut out = String::new();
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let count = load(&self.searches);

        let _ = writeln!(out, "# HELP objseek_search_requests_total Search requests handled.");
        let _ = writeln!(out, "# TYPE objseek_search_requests_total counter");
        let _ = writeln!(out, "objseek_search_requests_total {count}");
        let _ = writeln!(out, "# HELP objseek_search_errors_total Search requests that failed.");
        let _ = writeln!(out, "# TYPE objseek_search_errors_total counter");
        let _ = writeln!(out, "objseek_search_errors_total {}", load(&self.search_errors));

        let _ = writeln!(out, "# HELP objseek_search_latency_seconds Search latency including text encoding.");
        let _ = writeln!(out, "# TYPE objseek_search_latency_seconds histogram");
        for (bound, n) in LATENCY_BUCKETS.iter().zip(&self.buckets) {
            let _ = writeln!(out, "objseek_search_latency_seconds_bucket{{le=\"{bound}\"}} {}", load(n));
        }
        let _ = writeln!(out, "objseek_search_latency_seconds_bucket{{le=\"+Inf\"}} {count}");
        let _ = writeln!(
            out,
            "objseek_search_latency_seconds_sum {}",
            load(&self.latency_micros) as f64 / 1e6
        );
        let _ = writeln!(out, "objseek_search_latency_seconds_count {count}");

        let _ = writeln!(out, "# HELP objseek_rows_scanned_total Embedding rows scored by the index.");
        let _ = writeln!(out, "# TYPE objseek_rows_scanned_total counter");
        let _ = writeln!(out, "objseek_rows_scanned_total {}", index.rows_scanned());
        let _ = writeln!(out, "# HELP objseek_judgments_total Judgments appended to the journal.");
        let _ = writeln!(out, "# TYPE objseek_judgments_total counter");
        let _ = writeln!(out, "objseek_judgments_total {}", load(&self.judgments));

        let _ = writeln!(out, "# HELP objseek_index_images Images in the loaded index.");
        let _ = writeln!(out, "# TYPE objseek_index_images gauge");
        let _ = writeln!(out, "objseek_index_images {}", index.image_count());
        let _ = writeln!(out, "# HELP objseek_index_objects Object rows per class partition.");
        let _ = writeln!(out, "# TYPE objseek_index_objects gauge");
        for p in index.partitions() {
            let _ = writeln!(out, "objseek_index_objects{{class=\"{}\"}} {}", p.class(), p.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_cumulative() {
        let m = Metrics::default();
        m.observe_search(Duration::from_micros(500), true);
        m.observe_search(Duration::from_millis(30), false);
        let load = |i: usize| m.buckets[i].load(Ordering::Relaxed);
        assert_eq!(load(0), 1);
        assert_eq!(load(3), 1);
        assert_eq!(load(4), 2);
        assert_eq!(m.search_errors.load(Ordering::Relaxed), 1);
    }
}
