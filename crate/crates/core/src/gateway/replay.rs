use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_request, ChatMessage, ChatProvider, Exchange, GatewayError, PricingTable, Role, Stage};
use crate::schema::CallSchema;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub stage: String,
    pub ordinal: u32,
    pub reply: ChatMessage,
    pub usage: FixtureUsage,
}

/// A request observed by the replay provider, kept for inspection.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub stage: Stage,
    pub ordinal: u32,
    pub messages: Vec<ChatMessage>,
}

/// Deterministic provider serving fixture replies in per-stage order.
///
/// One instance belongs to one session: the ordinal cursor of each stage
/// advances with every call.
#[derive(Debug)]
pub struct ReplayProvider {
    entries: HashMap<(Stage, u32), FixtureEntry>,
    cursors: BTreeMap<Stage, u32>,
    pricing: PricingTable,
    requests: Vec<RecordedRequest>,
}

impl ReplayProvider {
    pub fn from_entries(
        entries: Vec<FixtureEntry>,
        pricing: PricingTable,
    ) -> Result<Self, GatewayError> {
        Self::build(entries, pricing, "<memory>")
    }

    pub fn from_file(path: &Path, pricing: PricingTable) -> Result<Self, GatewayError> {
        let fixture_err = |message: String| GatewayError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let entries: Vec<FixtureEntry> =
            serde_json::from_str(&text).map_err(|e| fixture_err(e.to_string()))?;
        Self::build(entries, pricing, &path.display().to_string())
    }

    fn build(
        entries: Vec<FixtureEntry>,
        pricing: PricingTable,
        origin: &str,
    ) -> Result<Self, GatewayError> {
        let fixture_err = |message: String| GatewayError::Fixture {
            path: origin.to_string(),
            message,
        };
        let mut map = HashMap::new();
        for (i, entry) in entries.into_iter().enumerate() {
            let stage = Stage::parse(&entry.stage)
                .ok_or_else(|| fixture_err(format!("entry {i}: unknown stage {:?}", entry.stage)))?;
            if entry.reply.role != Role::Assistant {
                return Err(fixture_err(format!("entry {i}: reply role must be assistant")));
            }
            entry
                .reply
                .validate()
                .map_err(|e| fixture_err(format!("entry {i}: {e}")))?;
            if map.insert((stage, entry.ordinal), entry).is_some() {
                return Err(fixture_err(format!("entry {i}: duplicate key")));
            }
        }
        Ok(Self {
            entries: map,
            cursors: BTreeMap::new(),
            pricing,
            requests: Vec::new(),
        })
    }

    pub fn requests(&self) -> &[RecordedRequest] {
        &self.requests
    }

    /// Keys that were never served, sorted by stage then ordinal.
    pub fn unused(&self) -> Vec<(Stage, u32)> {
        let mut keys: Vec<(Stage, u32)> = self
            .entries
            .keys()
            .filter(|(stage, ordinal)| *ordinal >= self.cursors.get(stage).copied().unwrap_or(0))
            .copied()
            .collect();
        keys.sort();
        keys
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every stage's ordinals must run 0..n without gaps.
    pub fn check_contiguous(&self) -> Result<(), String> {
        let mut per_stage: BTreeMap<Stage, Vec<u32>> = BTreeMap::new();
        for (stage, ordinal) in self.entries.keys() {
            per_stage.entry(*stage).or_default().push(*ordinal);
        }
        for (stage, mut ordinals) in per_stage {
            ordinals.sort_unstable();
            for (expected, got) in ordinals.iter().enumerate() {
                if *got != expected as u32 {
                    return Err(format!("{stage}: ordinal {expected} missing"));
                }
            }
        }
        Ok(())
    }

    pub fn stage_counts(&self) -> BTreeMap<Stage, usize> {
        let mut counts = BTreeMap::new();
        for (stage, _) in self.entries.keys() {
            *counts.entry(*stage).or_default() += 1;
        }
        counts
    }
}

impl ChatProvider for ReplayProvider {
    fn complete(
        &mut self,
        stage: Stage,
        messages: &[ChatMessage],
        _tool_schemas: Option<&[CallSchema]>,
    ) -> Result<Exchange, GatewayError> {
        check_request(stage, messages)?;
        let ordinal = self.cursors.get(&stage).copied().unwrap_or(0);
        let entry = self
            .entries
            .get(&(stage, ordinal))
            .ok_or(GatewayError::FixtureExhausted { stage, ordinal })?;
        let exchange = Exchange {
            reply: entry.reply.clone(),
            usage: self
                .pricing
                .usage(entry.usage.prompt_tokens, entry.usage.completion_tokens),
        };
        self.cursors.insert(stage, ordinal + 1);
        self.requests.push(RecordedRequest {
            stage,
            ordinal,
            messages: messages.to_vec(),
        });
        Ok(exchange)
    }
}
