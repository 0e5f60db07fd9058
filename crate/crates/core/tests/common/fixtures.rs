//! Shared fixtures for integration tests.

use cxl_core::encoder::CorpusNote;

pub const SENTENCES: [&str; 20] = [
    "patient remains intubated on assist control ventilation overnight",
    "sedation weaned slowly and patient follows simple commands",
    "copious thick secretions suctioned from the endotracheal tube",
    "breath sounds coarse bilaterally with diminished bases",
    "family met with team to discuss goals of care",
    "oxygen saturation stable above ninety two percent on current settings",
    "spontaneous breathing trial attempted but failed after twenty minutes",
    "chest film shows worsening bilateral infiltrates this morning",
    "heart rate elevated and blood pressure supported with pressors",
    "plan to continue antibiotics for suspected ventilator pneumonia",
    "skin intact and patient turned every two hours",
    "urine output adequate via foley catheter overnight",
    "tube feeds running at goal rate without residuals",
    "arterial blood gas shows mild respiratory acidosis",
    "peep increased to ten for worsening hypoxemia",
    "respiratory therapist adjusted tidal volume per protocol",
    "patient agitated overnight requiring additional sedation doses",
    "tracheostomy discussed with family as possible next step",
    "lungs clear after bronchoscopy removed mucus plug",
    "will attempt extubation tomorrow if mechanics improve",
];

pub fn sentence_corpus() -> Vec<CorpusNote> {
    SENTENCES
        .iter()
        .enumerate()
        .map(|(i, t)| CorpusNote {
            note_id: 1000 + i as u64,
            text: t.to_string(),
        })
        .collect()
}
