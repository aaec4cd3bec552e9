#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use chrono::{Duration, Utc};
use retgrade_core::model::GraderIdentity;
use retgrade_service::{router, DatasetMeta, ImageInfo, Service, ServiceConfig, StaticTokens, Submission, TokenEntry};
use serde_json::Value;
use tower::ServiceExt;

pub const ADMIN: &str = "admin-token";
pub const EXPIRED: &str = "expired-token";

pub fn token(grader_id: &str) -> String {
    format!("token-{grader_id}")
}

pub fn tokens(graders: &[GraderIdentity]) -> StaticTokens {
    let mut entries = vec![
        TokenEntry {
            token: ADMIN.into(),
            grader: None,
            admin: true,
            expires_at: None,
        },
        TokenEntry {
            token: EXPIRED.into(),
            grader: graders.first().cloned(),
            admin: false,
            expires_at: Some(Utc::now() - Duration::hours(1)),
        },
    ];
    entries.extend(graders.iter().map(|g| TokenEntry {
        token: token(&g.id),
        grader: Some(g.clone()),
        admin: false,
        expires_at: None,
    }));
    StaticTokens::new(entries).unwrap()
}

pub struct Resp {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Value,
}

pub struct Harness {
    pub graders: Vec<GraderIdentity>,
    pub config: ServiceConfig,
    pub service: Arc<Service>,
    pub router: Router,
}

impl Harness {
    pub fn open(data_dir: &Path, graders: &[GraderIdentity], snapshot_every: u64) -> Self {
        let config = ServiceConfig {
            snapshot_every,
            ..ServiceConfig::new(data_dir)
        };
        Self::with_config(config, graders)
    }

    pub fn with_config(config: ServiceConfig, graders: &[GraderIdentity]) -> Self {
        let service = Arc::new(Service::open(config.clone(), Box::new(tokens(graders))).unwrap());
        Self {
            graders: graders.to_vec(),
            config,
            router: router(Arc::clone(&service)),
            service,
        }
    }

    /// Simulates a restart: drops all in-memory state and recovers from disk.
    pub fn restart(self) -> Self {
        let Harness { graders, config, .. } = self;
        Self::with_config(config, &graders)
    }

    pub async fn request(&self, method: Method, uri: &str, token: Option<&str>, body: Option<String>, if_none_match: Option<&str>) -> Resp {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        if let Some(tag) = if_none_match {
            req = req.header(header::IF_NONE_MATCH, tag);
        }
        let req = match body {
            Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b)),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
        let body = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        Resp { status, headers, body }
    }

    pub async fn get(&self, uri: &str, token: &str) -> Resp {
        self.request(Method::GET, uri, Some(token), None, None).await
    }

    pub async fn create(&self, dataset_id: &str, images: &[String]) -> Resp {
        let meta = DatasetMeta {
            dataset_id: dataset_id.into(),
            images: images
                .iter()
                .map(|id| ImageInfo {
                    image_id: id.clone(),
                    uri: Some(format!("file:///images/{id}.jpg")),
                })
                .collect(),
            graders: self.graders.clone(),
        };
        self.request(Method::POST, "/v1/datasets", Some(ADMIN), Some(serde_json::to_string(&meta).unwrap()), None)
            .await
    }

    pub async fn submit(&self, dataset_id: &str, grader_id: &str, s: &Submission) -> Resp {
        self.request(
            Method::POST,
            &format!("/v1/datasets/{dataset_id}/grades"),
            Some(&token(grader_id)),
            Some(serde_json::to_string(s).unwrap()),
            None,
        )
        .await
    }
}

pub fn grade(image_id: &str, round: u32, dr: i64, dme_referable: bool) -> Submission {
    Submission {
        image_id: image_id.into(),
        round,
        gradability: retgrade_core::model::Gradability::FullyGradable,
        dr: Some(dr),
        dme: Some(if dme_referable {
            retgrade_core::model::DmeStatus::Referable
        } else {
            retgrade_core::model::DmeStatus::NotReferable
        }),
        note: None,
    }
}
