use metaphor_prompt_demo::{cluster_scatter_json, elbow_curve_json, render_prompt_text};

fn three_groups() -> String {
    let mut points = Vec::new();
    for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
        for (dx, dy) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)] {
            points.push(vec![cx + dx, cy + dy, 1.0]);
        }
    }
    serde_json::to_string(&points).unwrap()
}

#[test]
fn scatter_groups_points_and_projects_centroids() {
    let out: serde_json::Value = serde_json::from_str(&cluster_scatter_json(&three_groups(), 3, 0).unwrap()).unwrap();
    let assignment: Vec<u64> = out["assignment"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    for group in assignment.chunks(4) {
        assert!(group.iter().all(|&c| c == group[0]));
    }
    assert_eq!(out["coords"].as_array().unwrap().len(), 12);
    assert_eq!(out["centroid_coords"].as_array().unwrap().len(), 3);
    // Each group has within-cluster sum of squares 4 * 0.125.
    assert!((out["inertia"].as_f64().unwrap() - 1.5).abs() < 1e-9);
}

#[test]
fn elbow_finds_three_groups() {
    let out: serde_json::Value = serde_json::from_str(&elbow_curve_json(&three_groups(), 8, 0).unwrap()).unwrap();
    assert_eq!(out["elbow"], 3);
    assert_eq!(out["inertia"].as_array().unwrap().len(), 8);
}

#[test]
fn prompt_matches_layout() {
    let request = r#"{
        "item": {"id": "x", "question": "闪电像火蛇。这句话的喻体是？", "options": ["闪电", "雷声", "火蛇", "乌云"]},
        "candidates": [0.1, 0.1, 0.7, 0.1],
        "mode": "no_demonstrations"
    }"#;
    let text = render_prompt_text(request).unwrap();
    assert_eq!(
        text,
        "Q: 闪电像火蛇。这句话的喻体是？\nA. 闪电\nB. 雷声\nC. 火蛇\nD. 乌云\n\
         Answer candidates: A:0.1000, B:0.1000, C:0.7000, D:0.1000\n\
         Please state your final choice using the sentence \"The answer is {}.\"\n\
         A: Let's think step by step."
    );
}

#[test]
fn bad_inputs_are_reported() {
    assert!(cluster_scatter_json("[[0,0],[1]]", 1, 0).is_err());
    assert!(cluster_scatter_json("not json", 2, 0).is_err());
    assert!(render_prompt_text(r#"{"item": {"id": "x", "question": "q", "options": ["a","b","c","d"]}, "mode": "sideways"}"#).is_err());
    let full_without_demos = r#"{"item": {"id": "x", "question": "q", "options": ["a","b","c","d"]}, "candidates": [0.25,0.25,0.25,0.25], "mode": "full"}"#;
    assert!(render_prompt_text(full_without_demos).is_err());
}
