use std::collections::HashMap;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chronofield::archive::{archive_info, ArchiveMetadata, ArchiveReader, ArchiveWriter};
use chronofield::dataset::Dataset;
use chronofield::image::RgbaImage;
use chronofield::metrics::psnr;
use chronofield::profiles::{Profile, ProfileName};
use chronofield::scene_synth::{synth_dataset, SceneSpec};
use chronofield::trainer::train_timestep;
use chronofield::Field32;
use chronofield_service::{router, AppState, CameraSpec, ErrorBody, Quality, RenderRequest, ServiceConfig};
use http_body_util::BodyExt;
use tower::ServiceExt;

const SIZE: u32 = 24;
const TRAIN_CAMERA: u32 = 2;

struct Fixture {
    _dir: tempfile::TempDir,
    archive: PathBuf,
    dataset: Dataset,
    train_psnr: f64,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SceneSpec::desk();
        spec.rig.cameras = 8;
        spec.rig.width = SIZE;
        spec.rig.height = SIZE;
        spec.split.test = vec![0];
        spec.split.val = vec![];
        let data = dir.path().join("data");
        synth_dataset(&spec, &data).unwrap();
        let dataset = Dataset::open(&data).unwrap();

        let profile = Profile::get(ProfileName::Tiny);
        let mut cfg = profile.train.clone();
        cfg.iterations = 200;
        cfg.batch_rays = (SIZE * SIZE) as usize;
        let frames = dataset.load_frame_set(0, &[TRAIN_CAMERA]).unwrap();
        let (trained, log) = train_timestep::<f32>(&frames, &profile.field, &cfg, None, None).unwrap();
        let train_psnr = log.final_record().unwrap().psnr_train.unwrap();

        let archive = dir.path().join("scene.chrono");
        let meta = ArchiveMetadata {
            field_config: profile.field.clone(),
            background: dataset.background(),
            samples: cfg.render.sample_count(1.0),
        };
        let mut w = ArchiveWriter::create(&archive, meta, dataset.scale).unwrap();
        w.append(&Field32::init(profile.field.clone(), 2, 7).unwrap()).unwrap();
        w.append(&trained).unwrap();
        w.append(&Field32::init(profile.field.clone(), 1, 8).unwrap()).unwrap();
        Fixture {
            _dir: dir,
            archive,
            dataset,
            train_psnr,
        }
    })
}

fn state() -> Arc<AppState> {
    AppState::with_archive(
        ServiceConfig::default(),
        ArchiveReader::open(&fixture().archive).unwrap(),
    )
}

fn training_request(t: i64) -> RenderRequest {
    let ds = &fixture().dataset;
    RenderRequest {
        time_index: t,
        camera: CameraSpec {
            transform_matrix: Some(ds.transforms.frame(0, TRAIN_CAMERA).unwrap().transform_matrix),
            fov_x: ds.transforms.camera_angle_x,
            width: SIZE,
            height: SIZE,
            ..CameraSpec::default()
        },
        samples: None,
        quality: Quality::Full,
    }
}

async fn send(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn post(state: &Arc<AppState>, body: String) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::post("/render")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    send(state, req).await
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    send(state, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn query_uri(req: &RenderRequest) -> String {
    let query = url::form_urlencoded::Serializer::new(String::new())
        .extend_pairs(req.to_query_pairs())
        .finish();
    format!("/render?{query}")
}

fn error_body(body: &[u8]) -> ErrorBody {
    serde_json::from_slice(body).expect("JSON error body")
}

#[tokio::test]
async fn unavailable_until_loaded() {
    let state = AppState::new(ServiceConfig::default());
    let (status, _, body) = get(&state, "/archive").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_body(&body).error, "service_unavailable");
    let (status, _, _) = post(&state, serde_json::to_string(&training_request(0)).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    state.load(&fixture().archive).unwrap();
    assert_eq!(get(&state, "/archive").await.0, StatusCode::OK);
}

#[tokio::test]
async fn empty_archive_lists_no_timesteps() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.chrono");
    let meta = ArchiveMetadata {
        field_config: Profile::get(ProfileName::Tiny).field,
        background: [1.0; 3],
        samples: 32,
    };
    ArchiveWriter::create(&p, meta, 1.0).unwrap();
    let state = AppState::with_archive(ServiceConfig::default(), ArchiveReader::open(&p).unwrap());
    let (status, _, body) = get(&state, "/archive").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["timesteps"], serde_json::json!([]));
}

#[tokio::test]
async fn archive_listing_matches_info_report() {
    let (status, headers, body) = get(&state(), "/archive").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "application/json");
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["timesteps"], serde_json::json!([0, 1, 2]));
    let report = serde_json::to_vec(&archive_info(&fixture().archive).unwrap()).unwrap();
    assert_eq!(body, report);
}

#[tokio::test]
async fn training_view_reproduces_training_fit() {
    let state = state();
    let (status, headers, png) = post(&state, serde_json::to_string(&training_request(0)).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    let millis: u64 = headers["x-render-millis"].to_str().unwrap().parse().unwrap();
    assert!(millis < 60_000);
    let image = RgbaImage::decode_png(Cursor::new(png)).unwrap();
    assert_eq!((image.width, image.height), (SIZE, SIZE));
    let fx = fixture();
    let truth = fx.dataset.load_frame_set(0, &[TRAIN_CAMERA]).unwrap();
    let gt = truth.views[0].image.composite(fx.dataset.background());
    let got = psnr(&image.composite([0.0; 3]), &gt).unwrap();
    assert!(
        got > fx.train_psnr - 0.1,
        "service {got:.3} dB vs training {:.3} dB",
        fx.train_psnr
    );
}

#[tokio::test]
async fn identical_requests_give_identical_bytes() {
    let state = state();
    let body = serde_json::to_string(&training_request(0)).unwrap();
    let a = post(&state, body.clone()).await.2;
    let (b, c) = tokio::join!(post(&state, body.clone()), post(&state, body));
    assert_eq!(a, b.2);
    assert_eq!(a, c.2);
}

#[tokio::test]
async fn interleaved_times_match_serial_renders() {
    let serial: Vec<Vec<u8>> = {
        let mut out = Vec::new();
        for t in 0..3 {
            let s = state();
            out.push(post(&s, serde_json::to_string(&training_request(t)).unwrap()).await.2);
        }
        out
    };
    assert_ne!(serial[0], serial[1]);
    let shared = state();
    for t in [2, 0, 1, 0, 2, 1] {
        let got = post(&shared, serde_json::to_string(&training_request(t)).unwrap())
            .await
            .2;
        assert_eq!(got, serial[t as usize], "time {t}");
    }
}

#[tokio::test]
async fn cache_holds_at_most_k_fields() {
    let config = ServiceConfig {
        cache_size: 2,
        ..ServiceConfig::default()
    };
    let state = AppState::with_archive(config, ArchiveReader::open(&fixture().archive).unwrap());
    for t in [0, 1, 0, 2, 1] {
        let mut req = training_request(t);
        req.quality = Quality::Preview;
        assert_eq!(
            post(&state, serde_json::to_string(&req).unwrap()).await.0,
            StatusCode::OK
        );
    }
    // 0 miss, 1 miss, 0 hit, 2 miss (evicts 1), 1 miss
    assert_eq!(state.cache_stats(), (1, 4));
}

#[tokio::test]
async fn unknown_time_is_404_with_json_body() {
    let state = state();
    for t in [-1, 3, 1 << 40] {
        let (status, headers, body) = post(&state, serde_json::to_string(&training_request(t)).unwrap()).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(headers["content-type"], "application/json");
        let e = error_body(&body);
        assert_eq!(e.error, "not_found");
        assert!(e.detail.contains(&t.to_string()));
    }
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let state = state();
    assert_eq!(post(&state, "not json".into()).await.0, StatusCode::BAD_REQUEST);

    let mut both = training_request(0);
    both.camera.position = Some([0.0, 0.0, 4.0]);
    let (status, _, body) = post(&state, serde_json::to_string(&both).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_body(&body).error, "bad_request");

    let mut neither = training_request(0);
    neither.camera.transform_matrix = None;
    assert_eq!(
        post(&state, serde_json::to_string(&neither).unwrap()).await.0,
        StatusCode::BAD_REQUEST
    );

    let mut skewed = training_request(0);
    skewed.camera.transform_matrix.as_mut().unwrap()[0][0] = 3.0;
    assert_eq!(
        post(&state, serde_json::to_string(&skewed).unwrap()).await.0,
        StatusCode::BAD_REQUEST
    );

    let mut degenerate = training_request(0);
    degenerate.camera.transform_matrix = None;
    degenerate.camera.position = Some([0.0, 0.0, 4.0]);
    degenerate.camera.look_at = Some([0.0, 0.0, 4.0]);
    degenerate.camera.up = Some([0.0, 1.0, 0.0]);
    assert_eq!(
        post(&state, serde_json::to_string(&degenerate).unwrap()).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn limits_are_413() {
    let state = state();
    let mut big = training_request(0);
    big.camera.width = 4096;
    assert_eq!(
        post(&state, serde_json::to_string(&big).unwrap()).await.0,
        StatusCode::PAYLOAD_TOO_LARGE
    );
    let mut many = training_request(0);
    many.samples = Some(1 << 20);
    assert_eq!(
        post(&state, serde_json::to_string(&many).unwrap()).await.0,
        StatusCode::PAYLOAD_TOO_LARGE
    );
}

#[tokio::test]
async fn preview_halves_resolution() {
    let mut req = training_request(0);
    req.quality = Quality::Preview;
    let (status, _, png) = post(&state(), serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let image = RgbaImage::decode_png(Cursor::new(png)).unwrap();
    assert_eq!((image.width, image.height), (SIZE / 2, SIZE / 2));
}

#[tokio::test]
async fn look_at_form_renders() {
    let req = RenderRequest {
        time_index: 0,
        camera: CameraSpec {
            position: Some([0.0, 0.0, 6.0]),
            look_at: Some([0.0, 0.0, 0.0]),
            up: Some([0.0, 1.0, 0.0]),
            fov_x: 0.8,
            width: 16,
            height: 12,
            ..CameraSpec::default()
        },
        samples: Some(16),
        quality: Quality::Full,
    };
    let state = state();
    let (status, _, png) = post(&state, serde_json::to_string(&req).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(get(&state, &query_uri(&req)).await.2, png);
}

#[tokio::test]
async fn get_matches_post() {
    let state = state();
    let req = training_request(0);
    let posted = post(&state, serde_json::to_string(&req).unwrap()).await;
    let (status, headers, body) = get(&state, &query_uri(&req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(body, posted.2);
}

#[tokio::test]
async fn get_without_time_is_400() {
    let state = state();
    let req = training_request(0);
    let uri = query_uri(&req).replace("time_index=0&", "");
    let (status, _, body) = get(&state, &uri).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_body(&body).detail.contains("time_index"));
    assert_eq!(
        get(&state, &format!("{}&colour=red", query_uri(&req))).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[test]
fn matrix_survives_query_encoding() {
    let m = [
        [0.123456789012345, -0.987654321098765, 1e-12, 3.0000000001],
        [std::f64::consts::FRAC_1_SQRT_2, 0.7071067811865475, -2.5e-7, -1.25],
        [-0.3333333333333333, 0.1, 0.6666666666666666, 1e9 + 0.5],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let req = RenderRequest {
        time_index: 5,
        camera: CameraSpec {
            transform_matrix: Some(m),
            fov_x: 0.69,
            width: 10,
            height: 20,
            ..CameraSpec::default()
        },
        samples: Some(8),
        quality: Quality::Preview,
    };
    // encode as a browser would, then decode the way the server's query extractor does
    let encoded = query_uri(&req);
    let query = encoded.split_once('?').unwrap().1;
    let decoded: HashMap<String, String> = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    let back = RenderRequest::from_query(&decoded).unwrap();
    let got = back.camera.transform_matrix.unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((got[i][j] - m[i][j]).abs() <= 1e-9 * m[i][j].abs().max(1.0));
        }
    }
    assert_eq!(back, req);
}
