//! Concurrent-client latency measurement over TCP.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::Barrier;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{generate_with, GenerateOptions, LocalProjector, ModelWeights, TokenSeq};
use crate::protocol::{Enclave, TcpTransport};

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub clients: Vec<usize>,
    /// Fixed output lengths; decoding ignores EOS.
    pub lengths: Vec<usize>,
    pub requests_per_client: usize,
    /// Client `i` sends `prompts[i % prompts.len()]`.
    pub prompts: Vec<TokenSeq>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestTiming {
    pub clients: usize,
    pub max_new: usize,
    pub client: usize,
    pub request: usize,
    pub ttft_us: u64,
    pub e2e_us: u64,
    pub tokens: usize,
    pub matches_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySummary {
    pub clients: usize,
    pub max_new: usize,
    pub requests: usize,
    pub tokens: usize,
    pub e2e_mean_ms: f64,
    pub e2e_p50_ms: f64,
    pub e2e_p95_ms: f64,
    pub ttft_mean_ms: f64,
    pub ttft_p50_ms: f64,
    pub ttft_p95_ms: f64,
    pub all_match: bool,
    pub ttft_within_e2e: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub summaries: Vec<LatencySummary>,
    pub requests: Vec<RequestTiming>,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(clients: usize, max_new: usize, reqs: &[RequestTiming]) -> LatencySummary {
    let ms = |us: u64| us as f64 / 1000.0;
    let mut e2e: Vec<f64> = reqs.iter().map(|r| ms(r.e2e_us)).collect();
    let mut ttft: Vec<f64> = reqs.iter().map(|r| ms(r.ttft_us)).collect();
    e2e.sort_by(f64::total_cmp);
    ttft.sort_by(f64::total_cmp);
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    LatencySummary {
        clients,
        max_new,
        requests: reqs.len(),
        tokens: reqs.iter().map(|r| r.tokens).sum(),
        e2e_mean_ms: mean(&e2e),
        e2e_p50_ms: percentile(&e2e, 50.0),
        e2e_p95_ms: percentile(&e2e, 95.0),
        ttft_mean_ms: mean(&ttft),
        ttft_p50_ms: percentile(&ttft, 50.0),
        ttft_p95_ms: percentile(&ttft, 95.0),
        all_match: reqs.iter().all(|r| r.matches_reference),
        ttft_within_e2e: reqs.iter().all(|r| r.ttft_us <= r.e2e_us),
    }
}

impl LatencyReport {
    /// Every output matched the reference and no TTFT exceeded its latency.
    pub fn pass(&self) -> bool {
        !self.requests.is_empty() && self.summaries.iter().all(|s| s.all_match && s.ttft_within_e2e)
    }

    /// Mean latency non-decreasing in output length at each client count,
    /// allowing `slack` relative noise. Informational only.
    pub fn grows_with_length(&self, slack: f64) -> bool {
        let mut by_clients: Vec<&LatencySummary> = self.summaries.iter().collect();
        by_clients.sort_by_key(|s| (s.clients, s.max_new));
        by_clients.windows(2).filter(|w| w[0].clients == w[1].clients).all(|w| w[1].e2e_mean_ms >= w[0].e2e_mean_ms * (1.0 - slack))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "clients,max_new,requests,tokens,e2e_mean_ms,e2e_p50_ms,e2e_p95_ms,ttft_mean_ms,ttft_p50_ms,ttft_p95_ms,all_match,ttft_within_e2e\n",
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{}",
                s.clients,
                s.max_new,
                s.requests,
                s.tokens,
                s.e2e_mean_ms,
                s.e2e_p50_ms,
                s.e2e_p95_ms,
                s.ttft_mean_ms,
                s.ttft_p50_ms,
                s.ttft_p95_ms,
                s.all_match,
                s.ttft_within_e2e
            );
        }
        out
    }
}

/// Expected fixed-length outputs, computed locally without masking.
fn references(weights: &ModelWeights, plan: &BenchPlan) -> Result<Vec<Vec<TokenSeq>>> {
    let mut proj = LocalProjector::new(&weights.projections);
    plan.prompts
        .iter()
        .map(|p| {
            plan.lengths
                .iter()
                .map(|&n| generate_with(&weights.structural, &mut proj, p, GenerateOptions { max_new: n, ignore_eos: true }))
                .collect()
        })
        .collect()
}

/// Run every (client count, length) cell of `plan` against the provider at
/// `addr`. The enclave must already be set up against that provider; each
/// client opens its own connection.
pub fn run_bench(enclave: &Enclave, weights: &ModelWeights, addr: SocketAddr, plan: &BenchPlan) -> Result<LatencyReport> {
    if plan.prompts.is_empty() || plan.clients.is_empty() || plan.lengths.is_empty() || plan.requests_per_client == 0 {
        return Err(Error::EmptyRun);
    }
    let expected = references(weights, plan)?;
    let mut report = LatencyReport { summaries: Vec::new(), requests: Vec::new() };
    for &clients in &plan.clients {
        for (li, &max_new) in plan.lengths.iter().enumerate() {
            let opts = GenerateOptions { max_new, ignore_eos: true };
            let barrier = Barrier::new(clients);
            let results: Vec<Result<Vec<RequestTiming>>> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..clients)
                    .map(|client| {
                        let barrier = &barrier;
                        let expected = &expected;
                        s.spawn(move || -> Result<Vec<RequestTiming>> {
                            let pi = client % plan.prompts.len();
                            let prompt = &plan.prompts[pi];
                            let mut transport = TcpTransport::connect(addr, plan.timeout);
                            barrier.wait();
                            let transport = transport.as_mut().map_err(|e| Error::TransportClosed(e.to_string()))?;
                            let mut out = Vec::with_capacity(plan.requests_per_client);
                            for request in 0..plan.requests_per_client {
                                let start = Instant::now();
                                let mut first: Option<Duration> = None;
                                let tokens = enclave.run_session_observed(transport, prompt, opts, &mut |_| {
                                    first.get_or_insert_with(|| start.elapsed());
                                })?;
                                let e2e = start.elapsed();
                                let ttft = first.unwrap_or(e2e);
                                out.push(RequestTiming {
                                    clients,
                                    max_new,
                                    client,
                                    request,
                                    ttft_us: ttft.as_micros() as u64,
                                    e2e_us: e2e.as_micros() as u64,
                                    tokens: tokens.len(),
                                    matches_reference: tokens == expected[pi][li],
                                });
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("bench client panicked")).collect()
            });
            let mut cell = Vec::new();
            for r in results {
                cell.extend(r?);
            }
            report.summaries.push(summarize(clients, max_new, &cell));
            report.requests.extend(cell);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 95.0), 4.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn summary_flags() {
        let t = |ttft, e2e, ok| RequestTiming {
            clients: 1,
            max_new: 4,
            client: 0,
            request: 0,
            ttft_us: ttft,
            e2e_us: e2e,
            tokens: 4,
            matches_reference: ok,
        };
        let s = summarize(1, 4, &[t(10, 20, true), t(5, 30, true)]);
        assert!(s.all_match && s.ttft_within_e2e);
        assert_eq!(s.tokens, 8);
        assert!(!summarize(1, 4, &[t(30, 20, true)]).ttft_within_e2e);
        assert!(!summarize(1, 4, &[t(1, 20, false)]).all_match);
    }
}
