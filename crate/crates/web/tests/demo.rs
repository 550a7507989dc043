use objseek_core::eval::Verdict;
use objseek_core::preprocess::{extract_objects, pad_to_square};
use objseek_core::synth::random_scene;
use objseek_web::{instance_color, parse_verdicts, Scene, SearchDemo};

#[test]
fn scene_crops_match_the_core_pipeline() {
    let scene = Scene::generate(64, 48, 6, 11).unwrap();
    let (image, ann) = random_scene(64, 48, 6, 11).unwrap();
    let expected = extract_objects(&image, &ann).unwrap();
    assert_eq!(scene.objects().len(), expected.objects.len());
    assert_eq!(scene.skipped_empty(), expected.skipped_empty.len());
    for (got, want) in scene.objects().iter().zip(&expected.objects) {
        assert_eq!(got.bbox, want.bbox);
        assert_eq!(got.side, got.bbox.width.max(got.bbox.height));
        assert_eq!(got.crop_rgba.len(), (got.side * got.side * 4) as usize);
        let rgb: Vec<u8> = got
            .crop_rgba
            .chunks_exact(4)
            .flat_map(|p| {
                assert_eq!(p[3], 255);
                p[..3].to_vec()
            })
            .collect();
        assert_eq!(rgb, want.crop.data());
        assert_eq!(pad_to_square(&want.crop).data(), want.crop.data());
    }
    assert_eq!(scene.image_rgba().len(), 64 * 48 * 4);
    let mask = scene.mask_rgba();
    for (i, &id) in ann.instance_map.ids().iter().enumerate() {
        assert_eq!(&mask[i * 4..i * 4 + 3], &instance_color(id));
    }
    let json: serde_json::Value = serde_json::from_str(&scene.objects_json()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), scene.objects().len());
    assert!(scene.crop_rgba(999).is_empty());
}

#[test]
fn oversized_scene_is_rejected() {
    assert!(Scene::generate(4096, 10, 3, 1).is_err());
    assert!(Scene::generate(0, 10, 3, 1).is_err());
}

#[test]
fn planted_objects_rank_first() {
    let demo = SearchDemo::build(300, 4, 21).unwrap();
    let res = demo.run("person", "police", 10, "object").unwrap();
    assert_eq!(res.hits.len(), 10);
    assert!(res.hits[..4].iter().all(|h| h.planted));
    assert!(res.hits[4..].iter().all(|h| !h.planted));
    assert!(res.hits[0].tokens.iter().any(|t| t == "police"));
    assert_eq!(res.query_id.len(), 16);
    assert_eq!(demo.run("person", "police", 10, "object").unwrap(), res);
}

#[test]
fn demo_search_errors_and_full_mode() {
    let demo = SearchDemo::build(50, 1, 3).unwrap();
    let err = demo.run("animal", "cat", 5, "object").unwrap_err();
    assert!(err.contains("person") && err.contains("animal"), "{err}");
    assert!(demo.run("car", "red", 5, "sideways").is_err());
    let full = demo.run("car", "red", 5, "full").unwrap();
    assert_eq!(full.hits.len(), 5);
    assert!(full.hits.iter().all(|h| h.best_object_index.is_none() && !h.tokens.is_empty()));
    assert!(demo.run("car", "red", 0, "object").unwrap().hits.is_empty());
    let classes: serde_json::Value = serde_json::from_str(&demo.classes_json()).unwrap();
    assert_eq!(classes.as_array().unwrap().len(), 19);
}

#[test]
fn verdict_strings() {
    assert_eq!(
        parse_verdicts("T, f ?").unwrap(),
        vec![Verdict::TruePositive, Verdict::FalsePositive, Verdict::Unjudged]
    );
    assert!(parse_verdicts("TX").is_err());
    let v = parse_verdicts("TFT").unwrap();
    assert_eq!(objseek_core::eval::cumulative_tp_from_verdicts(&v, 4), vec![1, 1, 2, 2]);
}
