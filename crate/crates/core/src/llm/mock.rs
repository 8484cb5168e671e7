use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use super::{ChatBackend, ChatRequest, LlmError, Role};
use crate::seeded;

/// Planted in fixture code to mark it as "really" vulnerable for the mock.
pub const VULN_MARKER: &str = "/*VULN*/";

const VULNERABLE: &str = "this code is vulnerable";
const NON_VULNERABLE: &str = "this code is non-vulnerable";

/// Offline stand-in for a chat model.
///
/// Answers "this code is vulnerable" iff the code under test (the text after
/// the last `The code is ` line of the user message) contains
/// [`VULN_MARKER`]. With `noise > 0` a seeded, content-keyed fraction of
/// answers is flipped. The answer depends only on (user content, seed,
/// noise). Every call is counted, and an optional delay lets tests observe
/// concurrency.
#[derive(Debug, Default)]
pub struct MockBackend {
    pub seed: u64,
    pub noise: f64,
    pub delay: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise.clamp(0.0, 1.0);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Model name recorded in fingerprints and cache keys.
    pub fn model_name(&self) -> String {
        format!("mock-m1/seed={}/noise={}", self.seed, self.noise)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// The code segment rule M1 looks at.
    pub fn target_segment(user: &str) -> &str {
        let Some(start) = user.rfind("\nThe code is ").map(|i| i + "\nThe code is ".len()) else {
            return user;
        };
        let rest = &user[start..];
        match rest.rfind(". Let's start:") {
            Some(end) => &rest[..end],
            None => rest,
        }
    }

    /// Whether the seeded noise flips the answer for this content.
    pub fn flips(&self, user: &str) -> bool {
        if self.noise <= 0.0 {
            return false;
        }
        let mut rng = seeded::rng(seeded::derive_seed(self.seed, user));
        seeded::unit_interval(&mut rng) < self.noise
    }

    pub fn answer(&self, user: &str) -> &'static str {
        let vulnerable = Self::target_segment(user).contains(VULN_MARKER) != self.flips(user);
        if vulnerable {
            VULNERABLE
        } else {
            NON_VULNERABLE
        }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(delay) = self.delay {
            thread::sleep(delay);
        }
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let answer = self.answer(user).to_string();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{complete, BackendConfig, ChatMessage};

    fn user_prompt(code: &str) -> String {
        format!("Now you need to identify ... 'this code is non-vulnerable'.\nThe code is {code}. Let's start:")
    }

    fn ask(mock: &MockBackend, code: &str) -> String {
        let msgs = [ChatMessage::system(""), ChatMessage::user(user_prompt(code))];
        complete(&msgs, &BackendConfig::default(), mock).unwrap().content
    }

    #[test]
    fn marker_decides_the_answer() {
        let mock = MockBackend::new(0);
        assert_eq!(ask(&mock, "int f(){ /*VULN*/ gets(b); }"), "this code is vulnerable");
        assert_eq!(ask(&mock, "int f(){ return 0; }"), "this code is non-vulnerable");
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn markers_in_earlier_examples_are_ignored() {
        let mock = MockBackend::new(0);
        let user = format!(
            "Here are sampled examples from the training data.\nExample1: void g(){{/*VULN*/}}\nLabel1: this code is vulnerable.\n{}",
            user_prompt("int ok(void){return 0;}")
        );
        assert_eq!(mock.answer(&user), "this code is non-vulnerable");
    }

    #[test]
    fn zero_noise_is_pure_rule() {
        let mock = MockBackend::new(5).with_noise(0.0);
        for i in 0..50 {
            let code = format!("int f{i}(){{}}");
            assert!(!mock.flips(&user_prompt(&code)));
        }
    }

    #[test]
    fn seeded_noise_flip_set_is_reproducible() {
        let inputs: Vec<String> = (0..100).map(|i| user_prompt(&format!("int f{i}(void) {{ return {i}; }}"))).collect();
        let flip_set = |seed| -> Vec<usize> {
            let mock = MockBackend::new(seed).with_noise(0.5);
            (0..inputs.len()).filter(|&i| mock.flips(&inputs[i])).collect()
        };
        let first = flip_set(1);
        assert_eq!(first, flip_set(1));
        assert_ne!(first, flip_set(2));

        // oracle: one ChaCha8 stream per input, keyed by sha256(seed || content)
        let oracle: Vec<usize> = (0..inputs.len())
            .filter(|&i| {
                let mut rng = seeded::rng(seeded::derive_seed(1, &inputs[i]));
                seeded::unit_interval(&mut rng) < 0.5
            })
            .collect();
        assert_eq!(first, oracle);
        // frozen from the first run of this generator
        assert_eq!(first.len(), 47);
        assert_eq!(first[..8], [1, 2, 4, 6, 7, 8, 11, 12]);
    }
}
