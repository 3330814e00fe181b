//! Peak heap use while fusing a context set must not grow with its size.
//! Own binary so the counting allocator sees nothing but this test.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use wsicl::nn::{ModelConfig, ModelState};
use wsicl::prompt::{simulate_prompts, PromptSpec};
use wsicl::synth::{generate_sample, TaskFamily};
use wsicl::volume::{ContextSet, PromptType, Shape3};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn peak_during<R>(f: impl FnOnce() -> R) -> (usize, R) {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let r = f();
    (PEAK.load(Ordering::SeqCst) - base, r)
}

#[test]
fn fusion_memory_is_flat_in_context_size() {
    let shape = Shape3::cube(16).unwrap();
    let state: ModelState<f32> =
        ModelState::init(ModelConfig { base_channels: 4, input_shape: shape.0, ..ModelConfig::default() }, 1).unwrap();
    let fam = TaskFamily::random(3, 16, shape);
    let pairs: Vec<_> = (0..16)
        .map(|i| {
            let (x, y) = generate_sample(&fam, i).unwrap();
            (x, simulate_prompts(&y, &PromptSpec::new(PromptType::Box, 1, i as u64)).unwrap())
        })
        .collect();
    let one = ContextSet::new(pairs[..1].to_vec(), PromptType::Box).unwrap();
    let sixteen = ContextSet::new(pairs, PromptType::Box).unwrap();
    let (p1, _) = peak_during(|| state.fuse_context_with(&one, 1).unwrap());
    let (p16, _) = peak_during(|| state.fuse_context_with(&sixteen, 1).unwrap());
    println!("peak bytes: L=1 {p1}, L=16 {p16}");
    assert!(p16 as f64 <= 1.5 * p1 as f64);
}
