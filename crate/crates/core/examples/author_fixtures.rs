//! Writes the synthetic fixture cases used by the mock backends.
//!
//! ```text
//! cargo run -p keyfield --example author_fixtures -- crates/core/fixtures
//! ```
//!
//! Images, segment maps and captions are drawn here. Chat transcripts pair
//! the prompts the pipeline builds for each scripted question with a
//! hand-written reply, so rerun this after any template change.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use keyfield::backends::mock::{self, region_key, FixtureSet, Transcript};
use keyfield::codec::encode_label_png;
use keyfield::mask::{downscale_object, serialize_matrix};
use keyfield::prompt::{build_stage1_prompt, build_stage2_prompt};
use keyfield::{Bbox, LabelMap, Pipeline, PipelineConfig, Session};

const REFERENCE_STAGE1_REPLY: &str = include_str!("../tests/data/stage1_reply.reference.txt");
const REFERENCE_STAGE2_REPLY: &str = include_str!("../tests/data/stage2_reply.reference.txt");

struct Canvas {
    image: RgbImage,
    labels: LabelMap,
}

impl Canvas {
    fn new(w: u32, h: u32, background: [u8; 3]) -> Self {
        Self {
            image: RgbImage::from_pixel(w, h, Rgb(background)),
            labels: LabelMap::filled(w as usize, h as usize, 0),
        }
    }

    /// Paints the half-open rectangle `[x0, x1) x [y0, y1)`.
    fn rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3], label: u32) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.image.put_pixel(x, y, Rgb(color));
                self.labels.set(x as usize, y as usize, label);
            }
        }
    }

    fn save(&self, dir: &Path, captions: &BTreeMap<String, String>) -> Result<(), Box<dyn Error>> {
        fs::create_dir_all(dir)?;
        self.image.save(dir.join("image.png"))?;
        fs::write(dir.join("segments.png"), encode_label_png(&self.labels)?)?;
        fs::write(
            dir.join("captions.json"),
            serde_json::to_string_pretty(captions)? + "\n",
        )?;
        Ok(())
    }
}

/// Drawing, captions keyed by region, and scripted questions.
type Case = (Canvas, Vec<(Option<Bbox>, &'static str)>, Vec<Script>);

/// One scripted question: the stage-1 reply and, when it targets an object,
/// the stage-2 reply.
struct Script {
    question: &'static str,
    stage1: String,
    stage2: Option<String>,
}

fn door() -> Case {
    // door 200 x 440 at (20, 20) on a 240 x 480 wall
    let mut c = Canvas::new(240, 480, [196, 190, 178]);
    let (ox, oy) = (20u32, 20u32);
    let mut part = |x0: u32, y0: u32, x1: u32, y1: u32, color, label| c.rect(ox + x0, oy + y0, ox + x1, oy + y1, color, label);
    part(0, 0, 200, 440, [24, 24, 26], 1);
    part(20, 300, 180, 344, [70, 70, 74], 2);
    part(20, 344, 90, 388, [88, 88, 92], 3);
    part(90, 344, 150, 388, [58, 58, 62], 4);
    part(150, 344, 180, 388, [96, 96, 100], 5);
    part(4, 60, 24, 120, [140, 140, 140], 6);
    part(20, 396, 70, 418, [110, 110, 114], 7);
    part(150, 200, 172, 244, [205, 205, 210], 8);

    let captions = vec![
        (None, "a close-up of a black door"),
        (Some(Bbox::new(20, 20, 219, 459)), "a black door with a handle"),
    ];
    let scripts = vec![
        Script {
            question: "where can I kick the door open?",
            stage1: REFERENCE_STAGE1_REPLY.to_string(),
            stage2: Some(REFERENCE_STAGE2_REPLY.to_string()),
        },
        Script {
            question: "where should I push to open the door?",
            stage1: r#"{"Answer": "No", "Reply": "The object list does not say which part of the door should be pushed.", "Objects name": [[0, "Which area of you should be pushed to open you?"]], "Position": [[20, 20, 219, 459]]}"#.to_string(),
            stage2: Some(r#"{"answer": "Push the door near the handle, on the right side at mid height.", "whole segments": "No", "which segment": [], "target position": [[6, 8, 8, 11]]}"#.to_string()),
        },
    ];
    (c, captions, scripts)
}

fn mug() -> Case {
    let mut c = Canvas::new(320, 240, [222, 214, 200]);
    // body with a cartoon patch, handle notched into the right edge
    c.rect(20, 40, 114, 160, [236, 150, 180], 1);
    c.rect(104, 70, 114, 120, [214, 120, 150], 3);
    c.rect(45, 80, 75, 110, [250, 220, 60], 2);
    // phone
    c.rect(170, 50, 290, 190, [18, 18, 20], 4);
    // crumb, filtered as noise
    c.rect(150, 20, 153, 23, [90, 70, 40], 5);

    let captions = vec![
        (None, "a pink mug next to a black phone on a desk"),
        (Some(Bbox::new(20, 40, 113, 159)), "A pink mug with a cartoon character on it."),
        (Some(Bbox::new(170, 50, 289, 189)), "A black rectangular object."),
    ];
    let scripts = vec![Script {
        question: "Grab the mug",
        stage1: r#"{"Answer": "No", "Reply": "The mug is in the image; its handle is the part to grab.", "Objects name": [[1, "Which part of the mug may solve the request?"]], "Position": [[20, 40, 113, 159]]}"#.to_string(),
        stage2: Some(r#"{"answer": "Grab me by my handle on the right side.", "whole segments": "Yes", "which segment": [3], "target position": []}"#.to_string()),
    }];
    (c, captions, scripts)
}

fn cake() -> Case {
    let mut c = Canvas::new(320, 240, [240, 236, 228]);
    // sponge, frosting band, candle standing in the frosting
    c.rect(40, 80, 180, 200, [92, 52, 30], 1);
    c.rect(50, 80, 170, 100, [250, 245, 235], 2);
    c.rect(105, 82, 115, 100, [230, 60, 60], 3);
    c.rect(220, 130, 280, 200, [60, 110, 170], 4);

    let captions = vec![
        (None, "a chocolate cake and a blue cup on a table"),
        (Some(Bbox::new(40, 80, 179, 199)), "a chocolate cake with a candle"),
        (Some(Bbox::new(220, 130, 279, 199)), "a blue cup"),
    ];
    let scripts = vec![
        Script {
            question: "where is the cake?",
            stage1: r#"{"Answer": "Yes", "Reply": "The cake is on the left side of the table.", "Objects name": [[0, "Where is the cake?"]], "Position": [[40, 80, 179, 199]]}"#.to_string(),
            stage2: None,
        },
        Script {
            question: "where is the umbrella?",
            stage1: r#"{"Answer": "No", "Reply": "There is no umbrella in this image, so I cannot point it out.", "Objects name": [], "Position": []}"#.to_string(),
            stage2: None,
        },
    ];
    (c, captions, scripts)
}

fn blank() -> Case {
    let mut c = Canvas::new(64, 64, [128, 128, 128]);
    c.rect(10, 10, 12, 11, [126, 126, 126], 1);
    (c, vec![(None, "a plain gray surface")], Vec::new())
}

fn tiny() -> Case {
    let c = Canvas::new(1, 1, [128, 128, 128]);
    (c, vec![(None, "a single gray pixel")], Vec::new())
}

type CaseFn = fn() -> Case;

fn transcripts(session: &Session, scripts: &[Script]) -> Result<Vec<Transcript>, Box<dyn Error>> {
    let mut out = Vec::new();
    for s in scripts {
        let messages = build_stage1_prompt(&session.scene_caption, &session.objects, s.question)?;
        out.push(Transcript::new(messages, s.stage1.clone()));
        let Some(stage2) = &s.stage2 else { continue };
        let parsed = keyfield::prompt::parse_stage1(&s.stage1)?;
        let target = &parsed.objects[0];
        let object = session
            .object(target.object_id)
            .ok_or("script targets a missing object")?;
        let matrix = serialize_matrix(&downscale_object(object, 20)?);
        let messages = build_stage2_prompt(&object.descriptor, &target.follow_up, &matrix, "")?;
        out.push(Transcript::new(messages, stage2.clone()));
    }
    Ok(out)
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<(), Box<dyn Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures".into()));
    let cases: [(&str, CaseFn); 5] = [
        ("door", door),
        ("mug", mug),
        ("cake", cake),
        ("blank", blank),
        ("tiny", tiny),
    ];

    let mut scripts = Vec::new();
    for (name, build) in cases {
        let (canvas, captions, script) = build();
        let captions = captions
            .into_iter()
            .map(|(region, text)| (region_key(region), text.to_string()))
            .collect();
        let dir = root.join(name);
        let _ = fs::remove_file(dir.join("transcripts.json"));
        canvas.save(&dir, &captions)?;
        scripts.push((name, script));
    }

    let fixtures = Arc::new(FixtureSet::load(&root)?);
    let pipeline = Pipeline::new(mock::backends(fixtures), PipelineConfig::default());
    for (name, script) in scripts {
        let dir = root.join(name);
        let image = fs::read(dir.join("image.png"))?;
        let session = pipeline.detect_objects(image).await?;
        println!(
            "{name}: {} objects {:?}",
            session.objects.len(),
            session
                .objects
                .iter()
                .map(|o| (o.object_id, o.bbox, o.member_segments.clone()))
                .collect::<Vec<_>>()
        );
        if script.is_empty() {
            continue;
        }
        let t = transcripts(&session, &script)?;
        fs::write(dir.join("transcripts.json"), serde_json::to_string_pretty(&t)? + "\n")?;
    }
    Ok(())
}
