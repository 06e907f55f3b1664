//! Topic names, topic filters and the subscription index.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::QoS;

const MAX_TOPIC_BYTES: usize = 65_535;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic is {0} bytes, limit is 65535")]
    TooLong(usize),
    #[error("topic contains NUL")]
    Nul,
    #[error("wildcard in topic name")]
    WildcardInName,
    #[error("wildcard must occupy a whole level")]
    PartialWildcard,
    #[error("'#' must be the last level")]
    MultiLevelNotLast,
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > MAX_TOPIC_BYTES {
        return Err(TopicError::TooLong(s.len()));
    }
    if s.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

pub fn validate_topic_name(s: &str) -> Result<(), TopicError> {
    check_common(s)?;
    if s.contains(['+', '#']) {
        return Err(TopicError::WildcardInName);
    }
    Ok(())
}

/// A concrete topic a message is published to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        validate_topic_name(&s)?;
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// Topics starting with `$` are reserved and skipped by root wildcards.
    pub fn is_reserved(&self) -> bool {
        self.0.starts_with('$')
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TopicName {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicName::new(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterLevel {
    Literal(String),
    /// `+`
    SingleLevel,
    /// `#`
    MultiLevel,
}

impl fmt::Display for FilterLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterLevel::Literal(s) => f.write_str(s),
            FilterLevel::SingleLevel => f.write_str("+"),
            FilterLevel::MultiLevel => f.write_str("#"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    levels: Vec<FilterLevel>,
}

pub fn parse_filter(s: &str) -> Result<TopicFilter, TopicError> {
    check_common(s)?;
    let mut levels = Vec::new();
    let mut parts = s.split('/').peekable();
    while let Some(part) = parts.next() {
        let level = match part {
            "+" => FilterLevel::SingleLevel,
            "#" if parts.peek().is_none() => FilterLevel::MultiLevel,
            "#" => return Err(TopicError::MultiLevelNotLast),
            p if p.contains(['+', '#']) => return Err(TopicError::PartialWildcard),
            p => FilterLevel::Literal(p.to_owned()),
        };
        levels.push(level);
    }
    Ok(TopicFilter { levels })
}

impl TopicFilter {
    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn has_wildcards(&self) -> bool {
        self.levels.iter().any(|l| !matches!(l, FilterLevel::Literal(_)))
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_filter(s)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{level}")?;
        }
        Ok(())
    }
}

/// MQTT 3.1.1 wildcard matching, with `$`-prefixed topics hidden from
/// filters that start with a wildcard.
pub fn matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    let topic_levels: Vec<&str> = topic.levels().collect();
    if topic.is_reserved()
        && matches!(
            filter.levels.first(),
            Some(FilterLevel::SingleLevel | FilterLevel::MultiLevel)
        )
    {
        return false;
    }
    for (i, level) in filter.levels.iter().enumerate() {
        match level {
            FilterLevel::MultiLevel => return true,
            FilterLevel::SingleLevel => {
                if i >= topic_levels.len() {
                    return false;
                }
            }
            FilterLevel::Literal(lit) => {
                if topic_levels.get(i) != Some(&lit.as_str()) {
                    return false;
                }
            }
        }
    }
    filter.levels.len() == topic_levels.len()
}

#[derive(Debug)]
struct Node<S> {
    children: HashMap<FilterLevel, Node<S>>,
    subscribers: HashMap<S, QoS>,
}

impl<S> Default for Node<S> {
    fn default() -> Self {
        Node {
            children: HashMap::new(),
            subscribers: HashMap::new(),
        }
    }
}

impl<S> Node<S> {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.subscribers.is_empty()
    }
}

/// Index from topic filters to subscribed sessions.
#[derive(Debug)]
pub struct SubscriptionTrie<S> {
    root: Node<S>,
    len: usize,
}

impl<S> Default for SubscriptionTrie<S> {
    fn default() -> Self {
        SubscriptionTrie {
            root: Node::default(),
            len: 0,
        }
    }
}

impl<S: Clone + Eq + Hash> SubscriptionTrie<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of (filter, session) pairs.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Adds or overwrites the grant for `session` on `filter`.
    pub fn insert(&mut self, filter: &TopicFilter, session: S, granted: QoS) {
        let mut node = &mut self.root;
        for level in &filter.levels {
            node = node.children.entry(level.clone()).or_default();
        }
        if node.subscribers.insert(session, granted).is_none() {
            self.len += 1;
        }
    }

    /// Removes one pair; absent pairs are ignored. Returns whether anything
    /// was removed.
    pub fn remove(&mut self, filter: &TopicFilter, session: &S) -> bool {
        fn walk<S: Eq + Hash>(node: &mut Node<S>, levels: &[FilterLevel], session: &S) -> bool {
            match levels.split_first() {
                None => node.subscribers.remove(session).is_some(),
                Some((head, rest)) => {
                    let Some(child) = node.children.get_mut(head) else {
                        return false;
                    };
                    let removed = walk(child, rest, session);
                    if child.is_empty() {
                        node.children.remove(head);
                    }
                    removed
                }
            }
        }
        let removed = walk(&mut self.root, &filter.levels, session);
        if removed {
            self.len -= 1;
        }
        removed
    }

    /// Drops every subscription held by `session`.
    pub fn remove_session(&mut self, session: &S) -> usize {
        fn walk<S: Eq + Hash>(node: &mut Node<S>, session: &S) -> usize {
            let mut removed = node.subscribers.remove(session).is_some() as usize;
            node.children.retain(|_, child| {
                removed += walk(child, session);
                !child.is_empty()
            });
            removed
        }
        let removed = walk(&mut self.root, session);
        self.len -= removed;
        removed
    }

    /// Sessions whose filters match `topic`, each once at the highest
    /// granted QoS among its matching filters.
    pub fn match_subscribers(&self, topic: &TopicName) -> HashMap<S, QoS> {
        let levels: Vec<&str> = topic.levels().collect();
        let mut out = HashMap::new();
        self.collect(&self.root, &levels, 0, topic.is_reserved(), &mut out);
        out
    }

    fn collect(
        &self,
        node: &Node<S>,
        levels: &[&str],
        depth: usize,
        reserved: bool,
        out: &mut HashMap<S, QoS>,
    ) {
        let wildcards_allowed = !(reserved && depth == 0);
        if wildcards_allowed {
            if let Some(multi) = node.children.get(&FilterLevel::MultiLevel) {
                merge(out, &multi.subscribers);
            }
        }
        let Some((head, rest)) = levels.split_first() else {
            merge(out, &node.subscribers);
            return;
        };
        // FIXME: allocates a String per level to probe the map
        if let Some(child) = node.children.get(&FilterLevel::Literal((*head).to_owned())) {
            self.collect(child, rest, depth + 1, reserved, out);
        }
        if wildcards_allowed {
            if let Some(child) = node.children.get(&FilterLevel::SingleLevel) {
                self.collect(child, rest, depth + 1, reserved, out);
            }
        }
    }
}

fn merge<S: Clone + Eq + Hash>(out: &mut HashMap<S, QoS>, subs: &HashMap<S, QoS>) {
    for (session, &qos) in subs {
        out.entry(session.clone())
            .and_modify(|q| *q = (*q).max(qos))
            .or_insert(qos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> TopicFilter {
        parse_filter(s).unwrap()
    }

    fn t(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            f("motion-sensor").levels(),
            &[FilterLevel::Literal("motion-sensor".into())]
        );
        assert_eq!(parse_filter("a/#/b"), Err(TopicError::MultiLevelNotLast));
        assert_eq!(
            f("+/status").levels(),
            &[FilterLevel::SingleLevel, FilterLevel::Literal("status".into())]
        );
        assert_eq!(parse_filter("a+/b"), Err(TopicError::PartialWildcard));
        assert_eq!(parse_filter("a/b#"), Err(TopicError::PartialWildcard));
        assert_eq!(parse_filter(""), Err(TopicError::Empty));
        assert_eq!(parse_filter("a\0"), Err(TopicError::Nul));
        assert!(matches!(parse_filter(&"x".repeat(65_536)), Err(TopicError::TooLong(_))));
        assert_eq!(f("/").levels().len(), 2);
        assert_eq!(f("a//b").to_string(), "a//b");
    }

    #[test]
    fn topic_names_reject_wildcards() {
        assert!(TopicName::new("motion-sensor").is_ok());
        assert_eq!(TopicName::new("a/+"), Err(TopicError::WildcardInName));
        assert_eq!(TopicName::new("#"), Err(TopicError::WildcardInName));
        assert_eq!(TopicName::new(""), Err(TopicError::Empty));
    }

    #[test]
    fn matching_examples() {
        assert!(matches(&f("motion-sensor"), &t("motion-sensor")));
        assert!(matches(&f("sensors/#"), &t("sensors/pir/room1")));
        assert!(!matches(&f("+/status"), &t("broker/status/extra")));
        assert!(matches(&f("sensors/#"), &t("sensors")));
        assert!(matches(&f("+/+"), &t("/")));
        assert!(!matches(&f("#"), &t("$SYS/broker/counters")));
        assert!(!matches(&f("+/broker/counters"), &t("$SYS/broker/counters")));
        assert!(matches(&f("$SYS/#"), &t("$SYS/broker/counters")));
    }

    #[test]
    fn trie_examples() {
        let mut trie = SubscriptionTrie::new();
        assert!(trie.match_subscribers(&t("motion-sensor")).is_empty());

        trie.insert(&f("motion-sensor"), "S1", QoS::AtLeastOnce);
        assert_eq!(
            trie.match_subscribers(&t("motion-sensor")),
            HashMap::from([("S1", QoS::AtLeastOnce)])
        );

        let mut trie = SubscriptionTrie::new();
        trie.insert(&f("#"), "S1", QoS::AtMostOnce);
        trie.insert(&f("motion-sensor"), "S1", QoS::ExactlyOnce);
        assert_eq!(
            trie.match_subscribers(&t("motion-sensor")),
            HashMap::from([("S1", QoS::ExactlyOnce)])
        );
    }

    #[test]
    fn resubscribe_overwrites_and_remove_prunes() {
        let mut trie = SubscriptionTrie::new();
        trie.insert(&f("a/b/c"), 1u32, QoS::AtMostOnce);
        trie.insert(&f("a/b/c"), 1u32, QoS::ExactlyOnce);
        assert_eq!(trie.len(), 1);
        assert_eq!(trie.match_subscribers(&t("a/b/c"))[&1], QoS::ExactlyOnce);

        assert!(!trie.remove(&f("a/b/c"), &2));
        assert!(!trie.remove(&f("a/b"), &1));
        assert!(trie.remove(&f("a/b/c"), &1));
        assert!(trie.is_empty());
        assert!(trie.root.is_empty());
    }

    #[test]
    fn remove_session_drops_all_filters() {
        let mut trie = SubscriptionTrie::new();
        trie.insert(&f("a/#"), 1u32, QoS::AtMostOnce);
        trie.insert(&f("+/b"), 1u32, QoS::AtMostOnce);
        trie.insert(&f("+/b"), 2u32, QoS::AtLeastOnce);
        assert_eq!(trie.remove_session(&1), 2);
        assert_eq!(trie.len(), 1);
        assert_eq!(
            trie.match_subscribers(&t("a/b")),
            HashMap::from([(2u32, QoS::AtLeastOnce)])
        );
    }
}
