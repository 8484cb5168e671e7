use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{cached_complete, complete, BackendConfig, ChatBackend, ChatMessage, LlmError, RawAnswer, ResponseCache};

/// Runs independent requests on `cfg.parallelism` worker threads.
///
/// Results come back in request order. At most `parallelism` requests are
/// in flight at any instant.
pub fn run_batch(
    requests: &[Vec<ChatMessage>],
    cfg: &BackendConfig,
    backend: &dyn ChatBackend,
    cache: Option<&ResponseCache>,
) -> Vec<Result<RawAnswer, LlmError>> {
    if let Err(e) = cfg.validate() {
        return requests.iter().map(|_| Err(e.clone())).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RawAnswer, LlmError>>>> =
        Mutex::new(requests.iter().map(|_| None).collect());
    let workers = cfg.parallelism.min(requests.len()).max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(messages) = requests.get(i) else {
                    break;
                };
                let result = match cache {
                    Some(cache) => cached_complete(messages, cfg, cache, backend),
                    None => complete(messages, cfg, backend),
                };
                results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every request was processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use std::time::Duration;

    fn request(i: usize) -> Vec<ChatMessage> {
        let marker = if i.is_multiple_of(3) { "/*VULN*/" } else { "" };
        vec![
            ChatMessage::system(""),
            ChatMessage::user(format!("\nThe code is int f{i}(){{{marker}}}. Let's start:")),
        ]
    }

    #[test]
    fn in_flight_never_exceeds_parallelism() {
        let mock = MockBackend::new(0).with_delay(Duration::from_millis(5));
        let cfg = BackendConfig {
            parallelism: 3,
            ..Default::default()
        };
        let requests: Vec<_> = (0..24).map(request).collect();
        let results = run_batch(&requests, &cfg, &mock, None);
        assert_eq!(mock.calls(), 24);
        assert!(mock.max_in_flight() <= 3, "{}", mock.max_in_flight());
        assert!(mock.max_in_flight() >= 2, "workers should overlap");
        for (i, r) in results.iter().enumerate() {
            let expected = if i % 3 == 0 { "this code is vulnerable" } else { "this code is non-vulnerable" };
            assert_eq!(r.as_ref().unwrap().content, expected);
        }
    }

    #[test]
    fn duplicate_requests_in_one_batch_spend_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let mock = MockBackend::new(0).with_delay(Duration::from_millis(2));
        let cfg = BackendConfig {
            parallelism: 8,
            ..Default::default()
        };
        let requests: Vec<_> = (0..16).map(|_| request(7)).collect();
        let results = run_batch(&requests, &cfg, &mock, Some(&cache));
        assert_eq!(mock.calls(), 1);
        assert_eq!(results.iter().filter(|r| !r.as_ref().unwrap().cached).count(), 1);
    }
}
