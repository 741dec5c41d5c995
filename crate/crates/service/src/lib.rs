//! Local HTTP service behind the interactive transplanter.
//!
//! One working session per process. Previews are pure; commits mutate an
//! in-memory working set that is written to disk only on export.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use litterkit::dataset::{parse_dataset, serialize_dataset, validate, Annotation, Dataset, ImageRecord};
use litterkit::imaging::{encode_png, load_image, save_png, Image};
use litterkit::transplant::{extract_object, transplant_one, Placement};
use litterkit::TaxonomyMapping;

/// File name of the exported annotation file inside the export directory.
pub const EXPORT_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Rejected(String),
    #[error(transparent)]
    Core(#[from] litterkit::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset has {0} validation violations")]
    Invalid(usize),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        use litterkit::Error as E;
        match self {
            ServiceError::NotFound(_) | ServiceError::Core(E::UnknownImage(_)) => StatusCode::NOT_FOUND,
            ServiceError::Rejected(_)
            | ServiceError::Core(E::OutsideTarget | E::InvalidArgument(_) | E::ShapeMismatch(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub struct ServiceConfig {
    pub dataset: Dataset,
    pub image_root: PathBuf,
    /// Class names used by the `category` filter; identity when absent.
    pub mapping: Option<TaxonomyMapping>,
    /// Where export writes the annotation file and edited images.
    pub export_dir: Option<PathBuf>,
}

struct WorkingSet {
    dataset: Dataset,
    /// Target images changed by commits, keyed by image id.
    edited: HashMap<u64, Image>,
}

pub struct AppState {
    image_root: PathBuf,
    mapping: TaxonomyMapping,
    export_dir: Option<PathBuf>,
    working: RwLock<WorkingSet>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let mapping = config
            .mapping
            .unwrap_or_else(|| TaxonomyMapping::identity(&config.dataset));
        AppState {
            image_root: config.image_root,
            mapping,
            export_dir: config.export_dir,
            working: RwLock::new(WorkingSet {
                dataset: config.dataset,
                edited: HashMap::new(),
            }),
        }
    }

    fn working(&self) -> std::sync::RwLockReadGuard<'_, WorkingSet> {
        self.working.read().unwrap_or_else(|e| e.into_inner())
    }

    fn image_of(&self, ws: &WorkingSet, id: u64) -> ApiResult<Image> {
        if let Some(img) = ws.edited.get(&id) {
            return Ok(img.clone());
        }
        let rec = ws
            .dataset
            .image(id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id}")))?;
        Ok(load_image(self.image_root.join(&rec.file_name))?)
    }

    /// Composite for a request against the given working set, without mutating it.
    fn composite(&self, ws: &WorkingSet, req: &TransplantRequest) -> ApiResult<(Image, Annotation)> {
        let ann = ws
            .dataset
            .annotations
            .iter()
            .find(|a| a.id == req.annotation_id)
            .ok_or_else(|| ServiceError::NotFound(format!("annotation {}", req.annotation_id)))?;
        let src = self.image_of(ws, ann.image_id)?;
        let dst = self.image_of(ws, req.target_image_id)?;
        Ok(transplant_one(&src, ann, &dst, &req.placement)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransplantRequest {
    pub annotation_id: u64,
    pub target_image_id: u64,
    pub placement: Placement,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommitResponse {
    pub annotation_id: u64,
}

/// One row of `GET /annotations`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub category: String,
    /// Class under the service's mapping.
    pub class: String,
    pub bbox: [f64; 4],
    pub area: f64,
}

#[derive(Debug, Deserialize)]
struct AnnotationFilter {
    category: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}/file", get(image_file))
        .route("/annotations", get(list_annotations))
        .route("/annotations/{id}/crop", get(annotation_crop))
        .route("/preview", post(preview))
        .route("/commit", post(commit))
        .route("/export", get(export))
        .with_state(state)
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
}

async fn list_images(State(st): State<Arc<AppState>>) -> Json<Vec<ImageRecord>> {
    Json(st.working().dataset.images.clone())
}

async fn image_file(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let ws = st.working();
        if let Some(img) = ws.edited.get(&id) {
            return Ok((encode_png(img)?, "image/png"));
        }
        let rec = ws
            .dataset
            .image(id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {id}")))?;
        let path = st.image_root.join(&rec.file_name);
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "png" => "image/png",
            _ => "image/jpeg",
        };
        Ok((std::fs::read(path)?, mime))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, bytes.1)], Body::from(bytes.0)).into_response())
}

async fn list_annotations(
    State(st): State<Arc<AppState>>,
    Query(filter): Query<AnnotationFilter>,
) -> Json<Vec<AnnotationSummary>> {
    let ws = st.working();
    let d = &ws.dataset;
    let cats = d.category_index();
    let rows = d
        .annotations
        .iter()
        .filter_map(|a| {
            let class = st.mapping.target_of(a.category_id).unwrap_or_default().to_string();
            if filter.category.as_ref().is_some_and(|c| *c != class) {
                return None;
            }
            Some(AnnotationSummary {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                category: cats.get(&a.category_id).map(|c| c.name.clone()).unwrap_or_default(),
                class,
                bbox: a.bbox,
                area: a.area,
            })
        })
        .collect();
    Json(rows)
}

/// The bbox crop as RGBA, opaque exactly on the object mask.
async fn annotation_crop(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let ws = st.working();
        let ann = ws
            .dataset
            .annotations
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| ServiceError::NotFound(format!("annotation {id}")))?;
        let src = st.image_of(&ws, ann.image_id)?;
        let obj = extract_object(&src, ann)?;
        let rgba = RgbaImage::from_fn(obj.image.width(), obj.image.height(), |x, y| {
            let [r, g, b] = obj.image.get_pixel(x, y).0;
            Rgba([r, g, b, if obj.mask.get(x, y) { 255 } else { 0 }])
        });
        let mut buf = std::io::Cursor::new(Vec::new());
        rgba.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(litterkit::Error::from)?;
        Ok(buf.into_inner())
    })
    .await?;
    Ok(png_response(bytes))
}

async fn preview(State(st): State<Arc<AppState>>, Json(req): Json<TransplantRequest>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let ws = st.working();
        let (img, _) = st.composite(&ws, &req)?;
        Ok(encode_png(&img)?)
    })
    .await?;
    Ok(png_response(bytes))
}

async fn commit(State(st): State<Arc<AppState>>, Json(req): Json<TransplantRequest>) -> ApiResult<Json<CommitResponse>> {
    blocking(move || {
        let mut ws = st.working.write().unwrap_or_else(|e| e.into_inner());
        let (img, mut ann) = st.composite(&ws, &req)?;
        ann.id = ws.dataset.next_annotation_id();
        ann.image_id = req.target_image_id;
        let id = ann.id;
        // Edited pixels are kept losslessly; the record follows the new file.
        if let Some(rec) = ws.dataset.images.iter_mut().find(|r| r.id == req.target_image_id) {
            let stem = Path::new(&rec.file_name).with_extension("png");
            rec.file_name = stem.to_string_lossy().into_owned();
        }
        ws.dataset.annotations.push(ann);
        ws.edited.insert(req.target_image_id, img);
        log::info!("committed annotation {id} onto image {}", req.target_image_id);
        Ok(Json(CommitResponse { annotation_id: id }))
    })
    .await
}

async fn export(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let ws = st.working();
        let report = validate(&ws.dataset);
        if !report.is_clean() {
            return Err(ServiceError::Invalid(report.violations.len()));
        }
        let bytes = serialize_dataset(&ws.dataset);
        if let Some(dir) = &st.export_dir {
            write_export(dir, &ws, &bytes)?;
        }
        Ok(bytes)
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/json"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"annotations.json\""),
        ],
        Body::from(bytes),
    )
        .into_response())
}

fn write_export(dir: &Path, ws: &WorkingSet, annotations: &[u8]) -> ApiResult<()> {
    std::fs::create_dir_all(dir)?;
    for (id, img) in &ws.edited {
        let rec = ws.dataset.image(*id).expect("edited images exist in the dataset");
        let path = dir.join(&rec.file_name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_png(img, path)?;
    }
    std::fs::write(dir.join(EXPORT_FILE), annotations)?;
    log::info!("exported {} edited images to {}", ws.edited.len(), dir.display());
    Ok(())
}

/// Load and validate a dataset for serving.
pub fn load_config(dataset_path: &Path, image_root: &Path, export_dir: Option<PathBuf>) -> ApiResult<ServiceConfig> {
    let dataset = parse_dataset(&std::fs::read(dataset_path)?)?;
    let report = validate(&dataset);
    if !report.is_clean() {
        return Err(ServiceError::Invalid(report.violations.len()));
    }
    Ok(ServiceConfig {
        dataset,
        image_root: image_root.to_path_buf(),
        mapping: None,
        export_dir,
    })
}

/// Bind `addr`, failing immediately if it is taken, and return the listener
/// together with the resolved address.
pub async fn bind(addr: SocketAddr) -> ApiResult<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

/// Serve until the process is stopped.
pub async fn serve(config: ServiceConfig, listener: tokio::net::TcpListener) -> ApiResult<()> {
    let app = router(Arc::new(AppState::new(config)));
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, app).await?;
    Ok(())
}
