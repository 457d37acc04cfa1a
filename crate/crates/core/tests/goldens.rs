//! Fixed input/output pairs for prompt adaptation, critical-part extraction
//! and the report format.

use protfuse_core::evaluation::{aggregate_runs, extract_critical, format_report};
use protfuse_core::instruction_data::{adapt_molinst_prompt, TaskTag};

const PROMPTS: [(&str, &str); 20] = [
    (
        "Analyze the following protein sequence and predict its function.\n```\nMKTAYIAKQRQISFVKSHFSRQ\n```",
        "Analyze the following protein and predict its function.\n<protein>",
    ),
    (
        "Given this amino acid sequence, what is the catalytic activity?\n```\nMAALLKVAGLLLAGCSS\n```",
        "Given this protein, what is the catalytic activity?\n<protein>",
    ),
    (
        "What domains does this protein contain? MKVLAAGIVG LLLAAGCSSK",
        "What domains does this protein contain?\n<protein>",
    ),
    (
        "Describe the function of the protein below.\n>sp|P12345|TEST\nMKTAYIAKQRQISFVKSHFSRQLEERLGLIEVQ",
        "Describe the function of the protein below.\n<protein>",
    ),
    (
        "Here is a sequence:\n```\nMSTNPKPQRKTKRNTNRRPQ\n```\nWhat is its subcellular role?",
        "Here is a protein:\n<protein>\nWhat is its subcellular role?",
    ),
    ("Sequence: ```MKVLAAGIVGLLLA```\nPredict the domains.", "Protein:\n<protein>\nPredict the domains."),
    (
        "Predict the catalytic activity of the given protein.",
        "Predict the catalytic activity of the given protein.\n<protein>",
    ),
    ("Describe <protein> in detail.", "Describe in detail.\n<protein>"),
    (
        "Please evaluate the provided sequences and report the motifs.\n```\nACDEFGHIKLMNPQRSTVWY\n```",
        "Please evaluate the provided protein and report the motifs.\n<protein>",
    ),
    (
        "What is the function of this sequence ?\n```\nMKKLLPTAAAGLLLLAAQPAMA\n```",
        "What is the function of this protein?\n<protein>",
    ),
    ("Inspect the primary sequence.\n```fasta\n>seq1\nMKVLAAGIVGLLLAAG\n```", "Inspect the protein.\n<protein>"),
    (
        "Which family does this protein belong to?\n```\nMKVLAAGIVG\nLLLAAGCSSK\n```\nAnswer briefly.",
        "Which family does this protein belong to?\n<protein>\nAnswer briefly.",
    ),
    (
        "Use the format ```json``` for output. Analyze:\n```\nMKVLAAGIVGLLLAAGCSSK\n```",
        "Use the format ```json``` for output. Analyze:\n<protein>",
    ),
    (
        "Identify the domains in that sequence: MKVLAAGIVGLLLAAGCSSKQ",
        "Identify the domains in that protein:\n<protein>",
    ),
    ("Protein sequence:\nMAEGEITTFTALTEKFNLPPGNYKKPKLLYCSNG", "Protein:\n<protein>"),
    (
        "From the sequence below, infer the enzyme's catalytic activity.\n```\nMSDKIIHLTDDSFDTDVLKADGAILVDFWAEWCGPCKMIAPILDEIADEYQGKLTVAKLNIDQNPGTAPKYGIRGIPTLLLFKNGEVAASKVGALSKGQLKEFLDANLA\n```",
        "From the protein below, infer the enzyme's catalytic activity.\n<protein>",
    ),
    (
        "Examine the input protein sequences  carefully .\n```\nMKVLAAGIVGLLLAAG\n```",
        "Examine the input protein carefully.\n<protein>",
    ),
    (
        "This sequence encodes an enzyme. What reaction does it catalyze?\n```\nMKVLAAGIVGLLLAAGCSSK\n```",
        "This protein encodes an enzyme. What reaction does it catalyze?\n<protein>",
    ),
    (
        "Summarize the protein encoded by the amino acid sequence.\nMKVLAAGIVGLLLAAGCSSK",
        "Summarize the protein encoded by the protein.\n<protein>",
    ),
    ("```\nMKVLAAGIVGLLLAAG\n```\nPredict its function.", "<protein>\nPredict its function."),
];

#[test]
fn molinst_prompt_adaptation() {
    for (input, want) in PROMPTS {
        assert_eq!(adapt_molinst_prompt(input), want, "input {input:?}");
    }
}

const CRITICAL: [(TaskTag, &str, &str); 20] = [
    (
        TaskTag::CatalyticActivity,
        "Catalyzes the reaction: ATP + H2O = ADP + phosphate.",
        "ATP + H2O = ADP + phosphate",
    ),
    (TaskTag::CatalyticActivity, "ATP + H2O = ADP + phosphate", "ATP + H2O = ADP + phosphate"),
    (TaskTag::CatalyticActivity, "Catalyzes: A + B = C; D + E = F.", "A + B = C D + E = F"),
    (
        TaskTag::CatalyticActivity,
        "The enzyme is a kinase. It catalyzes L-serine + ATP = O-phospho-L-serine + ADP + H(+).",
        "L-serine + ATP = O-phospho-L-serine + ADP + H(+)",
    ),
    (
        TaskTag::CatalyticActivity,
        "Based on the provided protein, the enzyme appears to facilitate the chemical reaction: ATP + L-glutamate + NH4(+) = ADP + H(+) + L-glutamine + phosphate.",
        "ATP + L-glutamate + NH4(+) = ADP + H(+) + L-glutamine + phosphate",
    ),
    (
        TaskTag::CatalyticActivity,
        "This enzyme catalyzes the reaction a fatty acid + CoA + ATP = an acyl-CoA + AMP + diphosphate.",
        "a fatty acid + CoA + ATP = an acyl-CoA + AMP + diphosphate",
    ),
    (TaskTag::CatalyticActivity, "The protein has no known catalytic activity.", ""),
    (TaskTag::CatalyticActivity, "Reaction 1: A = B\nReaction 2: C = D", "A = B C = D"),
    (
        TaskTag::DomainMotif,
        "The protein contains the following domains: SH2, SH3.",
        "SH2, SH3",
    ),
    (TaskTag::DomainMotif, "Domain: Protein kinase", "Protein kinase"),
    (TaskTag::DomainMotif, "Our analysis reveals a bromo domain.", "bromo domain"),
    (
        TaskTag::DomainMotif,
        "It contains a WD repeat and has a C2H2-type zinc finger.",
        "WD repeat C2H2-type zinc finger",
    ),
    (TaskTag::DomainMotif, "No recognizable features.", ""),
    (TaskTag::DomainMotif, "Motifs identified: DEAD box; Q motif.", "DEAD box; Q motif"),
    (
        TaskTag::DomainMotif,
        "The sequence includes the ATP-binding region.",
        "ATP-binding region",
    ),
    (TaskTag::FunctionalDescription, "Binds DNA. Located in the nucleus.", "Binds DNA"),
    (
        TaskTag::FunctionalDescription,
        "This protein is involved in lipid metabolism and acts as a chaperone.",
        "This protein is involved in lipid metabolism and acts as a chaperone",
    ),
    (
        TaskTag::FunctionalDescription,
        "Function: regulates transcription. Subcellular location: nucleus.",
        "regulates transcription",
    ),
    (TaskTag::FunctionalDescription, "A small protein of unknown function.", ""),
    (
        TaskTag::FunctionalDescription,
        "Required for cell division. Participates in DNA repair.",
        "Required for cell division Participates in DNA repair",
    ),
];

#[test]
fn critical_extraction() {
    for (task, input, want) in CRITICAL {
        assert_eq!(extract_critical(input, task).unwrap(), want, "{} {input:?}", task.name());
    }
}

#[test]
fn report_format() {
    let reports = [
        aggregate_runs(TaskTag::Solubility, "accuracy", &[0.0, 1.0, 0.5], 4, 3).unwrap(),
        aggregate_runs(TaskTag::DomainMotif, "rouge_l_critical", &[0.25, 0.25, 0.25], 2, 3).unwrap(),
    ];
    let want = concat!(
        r#"{"task_tag":"solubility","metric":"accuracy","per_seed":[0.0,1.0,0.5],"mean":0.5,"std":0.408248290463863,"num_examples":4}"#,
        "\n",
        r#"{"task_tag":"domain_motif","metric":"rouge_l_critical","per_seed":[0.25,0.25,0.25],"mean":0.25,"std":0.0,"num_examples":2}"#,
        "\n\n",
        "task                     metric                mean   std          n  per-seed\n",
        "solubility               accuracy            0.5000 ± 0.4082       4  [0.0000, 1.0000, 0.5000]\n",
        "domain_motif             rouge_l_critical    0.2500 ± 0.0000       2  [0.2500, 0.2500, 0.2500]\n",
    );
    assert_eq!(format_report(&reports), want);
}
