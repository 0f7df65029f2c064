//! C ABI for the vidstory library.
//!
//! Every fallible function returns a [`VsStatus`]; on failure the message is
//! kept per thread and read with [`vs_last_error_message`]. Objects cross the
//! boundary as opaque handles that must be released with their `_free`
//! function. Strings returned by the library are released with
//! [`vs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vidstory::config::RunManifest;
use vidstory::data::{load_checkpoint, CheckpointKind, Dataset, FrameSet, Span, VideoRecord};
use vidstory::embedding::{EmbeddingModel, TrainingSet};
use vidstory::linalg::{cosine_sim, Matrix, Vector};
use vidstory::metrics::{bleu, cider, rouge_l, tokenize, CorpusIdf, TokenizedText, MAX_NGRAM};
use vidstory::narrator::{generate_story, NarratorParams};
use vidstory::retrieval::{knn_story, SentencePool, StoryRecord};
use vidstory::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    ZeroVector = 4,
    NonFinite = 5,
    Empty = 6,
    Validation = 7,
    PhaseOrder = 8,
    UnknownId = 9,
    Io = 10,
    Parse = 11,
    Panic = 12,
    /// The call succeeded with a warning, e.g. a story with no clips.
    Warning = 13,
}

impl From<&Error> for VsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DimensionMismatch { .. } => VsStatus::DimensionMismatch,
            Error::ZeroVector(_) => VsStatus::ZeroVector,
            Error::NonFinite(_) => VsStatus::NonFinite,
            Error::Empty(_) => VsStatus::Empty,
            Error::InvalidConfig(_) => VsStatus::InvalidArgument,
            Error::Validation { .. } => VsStatus::Validation,
            Error::PhaseOrder(_) => VsStatus::PhaseOrder,
            Error::UnknownId(_) => VsStatus::UnknownId,
            Error::Io { .. } => VsStatus::Io,
            Error::Json { .. } | Error::Csv(_) => VsStatus::Parse,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(VsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(VsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VsStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VsStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure or panic and returns the status.
fn guard(f: impl FnOnce() -> Result<VsStatus, Failure>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            if s == VsStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            VsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|s| str_arg(*s, what).map(str::to_owned))
        .collect()
}

unsafe fn f64_slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length without
/// the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer previously returned by this library and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Cosine similarity of two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_cosine_similarity(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = cosine_sim(f64_slice(a, len, "a")?, f64_slice(b, len, "b")?)?;
        Ok(VsStatus::Ok)
    })
}

unsafe fn spans(p: *const usize, n: usize, what: &str) -> Result<Vec<Span>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, 2 * n)
        .chunks(2)
        .map(|c| {
            if c[0] >= c[1] {
                Err(invalid(format!("{what}: span [{}, {}) is empty", c[0], c[1])))
            } else {
                Ok(Span::new(c[0], c[1]))
            }
        })
        .collect()
}

/// IoU of the frame sets covered by two span lists. Each list holds `n`
/// half-open `[start, end)` pairs flattened as `start0, end0, start1, ...`.
///
/// # Safety
/// `a` and `b` must point to `2 * n_a` and `2 * n_b` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn vs_frame_iou(a: *const usize, n_a: usize, b: *const usize, n_b: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (sa, sb) = (spans(a, n_a, "a")?, spans(b, n_b, "b")?);
        *out = FrameSet::from_spans(&sa)
            .iou(&FrameSet::from_spans(&sb))
            .ok_or_else(|| Failure(VsStatus::Empty, "both span lists are empty".into()))?;
        Ok(VsStatus::Ok)
    })
}

unsafe fn texts(
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
) -> Result<(TokenizedText, Vec<TokenizedText>), Failure> {
    let c = tokenize(str_arg(candidate, "candidate")?);
    let r: Vec<TokenizedText> = str_array(refs, n_refs, "references")?.iter().map(|s| tokenize(s)).collect();
    if r.is_empty() {
        return Err(Failure(VsStatus::Empty, "no references".into()));
    }
    Ok((c, r))
}

/// BLEU-1 to BLEU-4 of `candidate` against `n_refs` references, written to
/// `out[0..4]`.
///
/// # Safety
/// Strings must be NUL-terminated UTF-8; `refs` must hold `n_refs` of them;
/// `out` must point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_bleu(candidate: *const c_char, refs: *const *const c_char, n_refs: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (c, r) = texts(candidate, refs, n_refs)?;
        let b = bleu(&c, &r, MAX_NGRAM)?;
        ptr::copy_nonoverlapping(b.as_ptr(), out, MAX_NGRAM);
        Ok(VsStatus::Ok)
    })
}

/// ROUGE-L of `candidate` against `n_refs` references.
///
/// # Safety
/// As for [`vs_bleu`], with `out` pointing to one double.
#[no_mangle]
pub unsafe extern "C" fn vs_rouge_l(candidate: *const c_char, refs: *const *const c_char, n_refs: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (c, r) = texts(candidate, refs, n_refs)?;
        *out = rouge_l(&c, &r);
        Ok(VsStatus::Ok)
    })
}

/// Opaque CIDEr document statistics.
pub struct VsIdf(CorpusIdf);

/// Builds document statistics from `n_docs` reference documents.
///
/// # Safety
/// `docs` must hold `n_docs` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_idf_build(docs: *const *const c_char, n_docs: usize, out: *mut *mut VsIdf) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d: Vec<TokenizedText> = str_array(docs, n_docs, "docs")?.iter().map(|s| tokenize(s)).collect();
        *out = Box::into_raw(Box::new(VsIdf(CorpusIdf::build(&d)?)));
        Ok(VsStatus::Ok)
    })
}

/// Loads document statistics saved by the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_idf_load(path: *const c_char, out: *mut *mut VsIdf) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(VsIdf(CorpusIdf::load(Path::new(str_arg(path, "path")?))?)));
        Ok(VsStatus::Ok)
    })
}

/// # Safety
/// `idf` must be NULL or a handle from `vs_idf_build`/`vs_idf_load`.
#[no_mangle]
pub unsafe extern "C" fn vs_idf_free(idf: *mut VsIdf) {
    if !idf.is_null() {
        drop(Box::from_raw(idf));
    }
}

/// CIDEr of `candidate` against `n_refs` references.
///
/// # Safety
/// `idf` must be a live handle; otherwise as for [`vs_rouge_l`].
#[no_mangle]
pub unsafe extern "C" fn vs_cider(
    idf: *const VsIdf,
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        let idf = idf.as_ref().ok_or_else(|| null("idf"))?;
        let out = out_ptr(out, "out")?;
        let (c, r) = texts(candidate, refs, n_refs)?;
        *out = cider(&c, &r, &idf.0)?;
        Ok(VsStatus::Ok)
    })
}

/// Opaque sentence pool.
pub struct VsPool(SentencePool);

/// Pool of `n` sentences with row-major `n x dim` embeddings. Texts must be
/// distinct.
///
/// # Safety
/// `texts` must hold `n` strings, `embeddings` `n * dim` doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_pool_new(
    texts: *const *const c_char,
    embeddings: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut VsPool,
) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let t = str_array(texts, n, "texts")?;
        let e = f64_slice(embeddings, n * dim, "embeddings")?;
        let vecs: Vec<Vector> = e.chunks(dim).map(|c| Vector::from_vec(c.to_vec())).collect();
        let sources = vec![Default::default(); n];
        *out = Box::into_raw(Box::new(VsPool(SentencePool::from_parts(t, vecs, sources)?)));
        Ok(VsStatus::Ok)
    })
}

/// # Safety
/// `pool` must be NULL or a handle from `vs_pool_new`.
#[no_mangle]
pub unsafe extern "C" fn vs_pool_free(pool: *mut VsPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Number of sentences in the pool, or 0 for NULL.
///
/// # Safety
/// `pool` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_pool_len(pool: *const VsPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.len())
}

/// Non-duplicate retrieval: writes one pool index per clip to `out`
/// (length `c`).
///
/// # Safety
/// `clips` must hold `c * dim` doubles (row-major) and `out` `c` writable
/// slots; `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_knn_story(pool: *const VsPool, clips: *const f64, c: usize, dim: usize, k: usize, out: *mut usize) -> VsStatus {
    guard(|| {
        let pool = pool.as_ref().ok_or_else(|| null("pool"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 || c == 0 || k == 0 {
            return Err(invalid("c, dim and k must be positive"));
        }
        let m: Vec<Vector> = f64_slice(clips, c * dim, "clips")?
            .chunks(dim)
            .map(|r| Vector::from_vec(r.to_vec()))
            .collect();
        let story = knn_story(&m, &pool.0, k)?;
        for (i, e) in story.entries.iter().enumerate() {
            *out.add(i) = e.pool_index;
        }
        Ok(VsStatus::Ok)
    })
}

/// Trained pipeline loaded from a run directory: context-aware embeddings,
/// narrator and the training-sentence pool.
pub struct VsModel {
    model: EmbeddingModel,
    narrator: NarratorParams,
    pool: SentencePool,
    dataset: Dataset,
}

/// Loads the global and narrator checkpoints of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_model_load(run_dir: *const c_char, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = Path::new(str_arg(run_dir, "run_dir")?);
        let manifest = RunManifest::load(dir)?;
        let model: EmbeddingModel = load_checkpoint(&manifest.require(dir, CheckpointKind::Global)?, CheckpointKind::Global)?;
        let narrator: NarratorParams = load_checkpoint(&manifest.require(dir, CheckpointKind::Narrator)?, CheckpointKind::Narrator)?;
        manifest.check_inputs()?;
        let dataset = Dataset::load(&manifest.data_dir, &manifest.config.rules())?;
        let pool = SentencePool::from_training_set(&model, &TrainingSet::from_dataset(&dataset, &manifest.split.train)?)?;
        *out = Box::into_raw(Box::new(VsModel {
            model,
            narrator,
            pool,
            dataset,
        }));
        Ok(VsStatus::Ok)
    })
}

/// # Safety
/// `model` must be NULL or a handle from `vs_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vs_model_free(model: *mut VsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn tell(model: *const VsModel, video: &VideoRecord, k: usize, out_json: *mut *mut c_char) -> Result<VsStatus, Failure> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    if out_json.is_null() {
        return Err(null("out_json"));
    }
    let g = generate_story(&m.model, &m.narrator, &m.pool, video, k)?;
    let records = StoryRecord::from_story(&video.id, &g.story);
    let json = serde_json::to_string(&records).map_err(|e| Failure(VsStatus::Parse, e.to_string()))?;
    *out_json = into_c_string(json)?;
    match g.warning {
        Some(w) => {
            set_error(w);
            Ok(VsStatus::Warning)
        }
        None => Ok(VsStatus::Ok),
    }
}

/// Story for a video of the run's dataset as a JSON array of records
/// (`video_id`, `index`, `text`, `start`, `end`, `score`). Returns
/// `Warning` with an empty array when no clip was selected.
///
/// # Safety
/// `model` must be a live handle, `video_id` a NUL-terminated string and
/// `out_json` writable; free the result with [`vs_string_free`].
#[no_mangle]
pub unsafe extern "C" fn vs_model_tell(model: *const VsModel, video_id: *const c_char, k: usize, out_json: *mut *mut c_char) -> VsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let id = str_arg(video_id, "video_id")?;
        let video = m
            .dataset
            .video(id)
            .ok_or_else(|| Failure(VsStatus::UnknownId, format!("unknown id: {id}")))?;
        tell(model, video, k, out_json)
    })
}

/// Story for raw frame features (`t x d`, row-major).
///
/// # Safety
/// `frames` must hold `t * d` doubles; otherwise as for [`vs_model_tell`].
#[no_mangle]
pub unsafe extern "C" fn vs_model_tell_features(
    model: *const VsModel,
    frames: *const f64,
    t: usize,
    d: usize,
    k: usize,
    out_json: *mut *mut c_char,
) -> VsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if t == 0 || d == 0 {
            return Err(invalid("t and d must be positive"));
        }
        let data = f64_slice(frames, t * d, "frames")?.to_vec();
        let template = m
            .dataset
            .videos
            .first()
            .ok_or_else(|| Failure(VsStatus::Empty, "dataset has no videos".into()))?;
        let video = VideoRecord {
            id: "input".to_owned(),
            category: template.category,
            fps: template.fps,
            frames: Matrix::from_vec(t, d, data)?,
        };
        tell(model, &video, k, out_json)
    })
}
