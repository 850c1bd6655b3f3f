use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic `{0}` contains whitespace")]
    Whitespace(String),
    #[error("topic `{0}` has an empty segment")]
    EmptySegment(String),
    #[error("wildcard misplaced in `{0}`")]
    Wildcard(String),
}

fn check_common(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() {
        return Err(TopicError::Empty);
    }
    if topic.chars().any(char::is_whitespace) {
        return Err(TopicError::Whitespace(topic.to_string()));
    }
    if topic.split('/').any(str::is_empty) {
        return Err(TopicError::EmptySegment(topic.to_string()));
    }
    Ok(())
}

/// Publish topics never contain `#`.
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    check_common(topic)?;
    if topic.contains('#') {
        return Err(TopicError::Wildcard(topic.to_string()));
    }
    Ok(())
}

/// Filters may end in a `#` segment; `#` is invalid anywhere else.
pub fn validate_filter(filter: &str) -> Result<(), TopicError> {
    check_common(filter)?;
    let segments: Vec<&str> = filter.split('/').collect();
    let last = segments.len() - 1;
    for (i, seg) in segments.iter().enumerate() {
        if seg.contains('#') && !(i == last && *seg == "#") {
            return Err(TopicError::Wildcard(filter.to_string()));
        }
    }
    Ok(())
}

/// Segment-wise match; a trailing `#` matches any remaining segments.
pub fn match_topic(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some(a), Some(b)) if a == b => continue,
            (None, None) => return true,
            _ => return false,
        }
    }
}
