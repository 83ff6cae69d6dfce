//! Thin HTTP client for the domain manager API.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {reason}")]
    Connection { url: String, reason: String },
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String, body: Value },
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Process exit code for an API status.
pub fn exit_code_for_status(status: u16) -> u8 {
    match status {
        400 => 10,
        401 => 11,
        403 => 12,
        404 => 13,
        409 => 14,
        422 => 15,
        507 => 16,
        _ => 19,
    }
}

impl ClientError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ClientError::Api { status, .. } => exit_code_for_status(*status),
            ClientError::Connection { .. } | ClientError::Malformed(_) => 2,
        }
    }
}

pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

/// Successful response: status plus JSON body.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { base: base.trim_end_matches('/').to_string(), token, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn finish(&self, url: &str, result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Reply, ClientError> {
        let mut resp = result.map_err(|e| ClientError::Connection { url: url.to_string(), reason: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ClientError::Malformed(e.to_string()))?;
        let body: Value = serde_json::from_str(&text).map_err(|e| ClientError::Malformed(format!("{e}: {text}")))?;
        if status >= 400 && status != 503 {
            let message = body.get("error").and_then(Value::as_str).unwrap_or("").to_string();
            return Err(ClientError::Api { status, message, body });
        }
        Ok(Reply { status, body })
    }

    fn get(&self, path: &str) -> Result<Reply, ClientError> {
        self.get_with(path, &[])
    }

    fn get_with(&self, path: &str, query: &[(&str, String)]) -> Result<Reply, ClientError> {
        let url = self.url(path);
        let mut req = self.agent.get(&url);
        for (k, v) in query {
            req = req.query(k, v);
        }
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        self.finish(&url, req.call())
    }

    pub fn submit(&self, document: &str) -> Result<Reply, ClientError> {
        let url = self.url("/deployments");
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        self.finish(&url, req.send(document))
    }

    pub fn status(&self, id: &str) -> Result<Reply, ClientError> {
        self.get(&format!("/deployments/{id}"))
    }

    pub fn list(&self) -> Result<Reply, ClientError> {
        self.get("/deployments")
    }

    pub fn terminate(&self, id: &str) -> Result<Reply, ClientError> {
        let url = self.url(&format!("/deployments/{id}"));
        let mut req = self.agent.delete(&url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        self.finish(&url, req.call())
    }

    pub fn catalog(&self) -> Result<Reply, ClientError> {
        self.get("/catalog")
    }

    pub fn metrics(&self, query: &str, from: Option<u64>, to: Option<u64>) -> Result<Reply, ClientError> {
        let mut params = vec![("query", query.to_string())];
        params.extend(from.map(|f| ("from", f.to_string())));
        params.extend(to.map(|t| ("to", t.to_string())));
        self.get_with("/metrics", &params)
    }

    pub fn health(&self) -> Result<Reply, ClientError> {
        self.get("/health")
    }

    pub fn resolve(&self, domain: &str) -> Result<Reply, ClientError> {
        self.get(&format!("/domains/{domain}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes: std::collections::BTreeSet<u8> =
            [400, 401, 403, 404, 409, 422, 507, 500].map(exit_code_for_status).into_iter().collect();
        assert_eq!(codes.len(), 8);
        assert!(!codes.contains(&0) && !codes.contains(&1) && !codes.contains(&2));
    }
}
