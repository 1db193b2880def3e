//! Seeded synthetic labeled-page generator.
//!
//! Stands in for licensed production labels: each page mixes primary content
//! (title, headings, paragraphs, optional table and list) with boilerplate
//! (navigation menus, sidebar link blocks, cookie banners, footer legalese).
//! Styles vary deliberately — headings are sometimes written with `<p>` tags
//! and menus sometimes with `<h4>`/`<p>` instead of lists — so tag identity
//! alone cannot solve the task. Labels are emitted against the node ids the
//! DOM pipeline assigns, which keeps them self-consistent by construction.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledDocument;
use crate::dom::{build_node_sequence, normalize_text, parse_html};
use crate::model::{
    LabelSet, LABEL_HEADING, LABEL_LIST, LABEL_PARAGRAPH, LABEL_PRIMARY, LABEL_TABLE, LABEL_TITLE,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_pages: usize,
    pub seed: u64,
    /// Primary body paragraphs per page (inclusive range).
    pub primary_paragraph_range: (usize, usize),
    /// Primary headings per page.
    pub heading_range: (usize, usize),
    /// Boilerplate menu blocks per page.
    pub boilerplate_menu_range: (usize, usize),
    /// Links per menu block.
    pub menu_items_range: (usize, usize),
    /// Footer legalese paragraphs per page.
    pub footer_paragraph_range: (usize, usize),
    pub table_probability: f64,
    pub list_probability: f64,
    /// Vocabulary seed list for primary content text.
    pub content_vocabulary: Vec<String>,
    /// Vocabulary seed list for boilerplate text.
    pub boilerplate_vocabulary: Vec<String>,
}

const CONTENT_WORDS: &[&str] = &[
    "river", "mountain", "theory", "energy", "crystal", "harvest", "signal", "motion", "pattern",
    "garden", "silver", "window", "physics", "history", "novel", "engine", "coastal", "village",
    "climate", "forest", "painting", "journey", "market", "science", "culture", "stone", "bridge",
    "meadow", "autumn", "winter", "language", "melody", "texture", "horizon", "compass", "voyage",
    "harbor", "lantern", "archive", "census", "treaty", "orchard", "granite", "nebula", "orbit",
    "current", "glacier", "valley", "summit", "plateau", "basin", "delta", "canyon", "prairie",
    "reef", "lagoon", "tundra", "savanna", "estuary", "fjord", "quartz", "basalt", "marble",
    "cedar", "willow", "juniper", "maple", "spruce", "fescue", "clover", "barley", "sorghum",
    "quinoa", "saffron", "ginger", "cumin", "paprika", "anise", "fennel",
];

const BOILERPLATE_WORDS: &[&str] = &[
    "home", "about", "contact", "login", "register", "subscribe", "newsletter", "privacy",
    "policy", "terms", "conditions", "cookies", "consent", "accept", "settings", "preferences",
    "careers", "support", "help", "faq", "sitemap", "copyright", "reserved", "rights", "legal",
    "disclaimer", "trademark", "partners", "advertise", "media", "press", "account", "profile",
    "signin", "signout", "menu", "search", "share", "follow", "twitter", "facebook", "instagram",
    "linkedin", "youtube", "rss", "feedback", "store", "pricing", "plans", "trial", "download",
    "related", "trending", "popular", "recommended", "sponsored", "promotion",
];

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pages: 100,
            seed: 0,
            primary_paragraph_range: (6, 13),
            heading_range: (2, 5),
            boilerplate_menu_range: (2, 4),
            menu_items_range: (3, 7),
            footer_paragraph_range: (2, 3),
            table_probability: 0.5,
            list_probability: 0.5,
            content_vocabulary: CONTENT_WORDS.iter().map(|s| s.to_string()).collect(),
            boilerplate_vocabulary: BOILERPLATE_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SyntheticSpec {
    /// Loose analytical bounds on the fraction of primary-labeled nodes per
    /// generated page, derived from the configured ranges.
    pub fn primary_fraction_bounds(&self) -> (f64, f64) {
        // primary nodes: title + headings + paragraphs (+ table + list)
        let p_min = (1 + self.heading_range.0 + self.primary_paragraph_range.0) as f64;
        let p_max =
            (1 + self.heading_range.1 + self.primary_paragraph_range.1) as f64 + 2.0;
        // boilerplate nodes: menus (1 node as a list, up to items as text
        // links) + cookie banner + sidebar block + footer
        let b_min = (self.boilerplate_menu_range.0 + 1 + 1 + self.footer_paragraph_range.0) as f64;
        let b_max = (self.boilerplate_menu_range.1 * self.menu_items_range.1
            + 2
            + self.menu_items_range.1
            + self.footer_paragraph_range.1) as f64;
        (p_min / (p_min + b_max), p_max / (p_max + b_min))
    }
}

struct PageBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    spec: &'a SyntheticSpec,
    /// normalized text → label, for every span placed on the page
    roles: HashMap<String, LabelSet>,
    html: String,
}

impl<'a> PageBuilder<'a> {
    fn words(&mut self, primary: bool, count: usize) -> String {
        let vocab = if primary {
            &self.spec.content_vocabulary
        } else {
            &self.spec.boilerplate_vocabulary
        };
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(vocab.choose(self.rng).expect("non-empty vocabulary").clone());
        }
        out.join(" ")
    }

    /// A fresh span whose normalized text is unique on the page.
    fn span(&mut self, primary: bool, label: LabelSet, lo: usize, hi: usize) -> String {
        loop {
            let n = self.rng.random_range(lo..=hi);
            let text = self.words(primary, n);
            let key = normalize_text(&text);
            if !self.roles.contains_key(&key) {
                self.roles.insert(key, label);
                return text;
            }
        }
    }

    /// Register a table/list whose pipeline text is the normalized join of
    /// its pieces.
    fn register_composite(&mut self, pieces: &[String], label: LabelSet) {
        let normed: Vec<String> = pieces
            .iter()
            .map(|p| normalize_text(p))
            .filter(|p| !p.is_empty())
            .collect();
        self.roles.insert(normed.join(" "), label);
    }

    fn menu_block(&mut self) {
        let items = self.rng.random_range(
            self.spec.menu_items_range.0..=self.spec.menu_items_range.1,
        );
        let texts: Vec<String> = (0..items)
            .map(|_| {
                let n = self.rng.random_range(1..=3);
                self.words(false, n)
            })
            .collect();
        match self.rng.random_range(0..3u8) {
            0 => {
                // classic list menu: one absorbed List node
                let unique: Vec<String> = texts
                    .iter()
                    .map(|t| normalize_text(t))
                    .filter(|t| !t.is_empty())
                    .collect();
                let key = unique.join(" ");
                if self.roles.contains_key(&key) {
                    return self.menu_block();
                }
                self.roles.insert(key, LabelSet::none());
                self.html.push_str("<nav><ul>");
                for t in &texts {
                    self.html
                        .push_str(&format!("<li><a href=\"#\">{t}</a></li>"));
                }
                self.html.push_str("</ul></nav>");
            }
            1 => {
                // div-of-anchors menu: one Text node per link
                self.html.push_str("<div class=\"nav\">");
                for t in texts {
                    let key = normalize_text(&t);
                    if self.roles.contains_key(&key) {
                        continue;
                    }
                    self.roles.insert(key, LabelSet::none());
                    self.html.push_str(&format!("<a href=\"#\">{t}</a> "));
                }
                self.html.push_str("</div>");
            }
            _ => {
                // boilerplate written with heading/paragraph tags
                let head = self.span(false, LabelSet::none(), 1, 3);
                self.html.push_str(&format!("<h4>{head}</h4><p>"));
                for t in texts {
                    let key = normalize_text(&t);
                    if self.roles.contains_key(&key) {
                        continue;
                    }
                    self.roles.insert(key, LabelSet::none());
                    self.html.push_str(&format!("<a href=\"#\">{t}</a> "));
                }
                self.html.push_str("</p>");
            }
        }
    }
}

/// Generate a deterministic labeled corpus: byte-identical output for equal
/// specs.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Vec<LabeledDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_pages)
        .map(|i| generate_page(spec, &mut rng, i))
        .collect()
}

fn generate_page(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, index: usize) -> LabeledDocument {
    let mut b = PageBuilder {
        rng,
        spec,
        roles: HashMap::new(),
        html: String::new(),
    };

    let title = b.span(
        true,
        LabelSet::none().with(LABEL_TITLE).with(LABEL_PRIMARY),
        3,
        7,
    );
    b.html
        .push_str(&format!("<html><head><title>{title}</title></head><body>"));

    // top navigation
    let menus = b
        .rng
        .random_range(spec.boilerplate_menu_range.0..=spec.boilerplate_menu_range.1);
    b.menu_block();

    // cookie banner
    let banner = b.span(false, LabelSet::none(), 8, 16);
    b.html
        .push_str(&format!("<div class=\"cookie-banner\">{banner}</div>"));

    b.html.push_str("<main>");
    let n_heads = b.rng.random_range(spec.heading_range.0..=spec.heading_range.1);
    let n_paras = b
        .rng
        .random_range(spec.primary_paragraph_range.0..=spec.primary_paragraph_range.1);
    let mut paras_left = n_paras;
    for h in 0..n_heads {
        let heading = b.span(
            true,
            LabelSet::none().with(LABEL_HEADING).with(LABEL_PRIMARY),
            2,
            6,
        );
        // unstandardized pages sometimes mark headings up as paragraphs
        if b.rng.random_bool(0.25) {
            b.html.push_str(&format!("<p class=\"hd\"><b>{heading}</b></p>"));
        } else {
            let level = b.rng.random_range(1..=3);
            b.html.push_str(&format!("<h{level}>{heading}</h{level}>"));
        }
        let section_paras = if h + 1 == n_heads {
            paras_left
        } else {
            b.rng.random_range(1..=paras_left.saturating_sub(n_heads - h - 1).max(1))
        };
        for _ in 0..section_paras {
            let para = b.span(
                true,
                LabelSet::none().with(LABEL_PARAGRAPH).with(LABEL_PRIMARY),
                10,
                22,
            );
            b.html.push_str(&format!("<p>{para}</p>"));
            paras_left = paras_left.saturating_sub(1);
        }
    }

    if b.rng.random_bool(spec.table_probability) {
        let rows = b.rng.random_range(2..=4);
        let cols = b.rng.random_range(2..=3);
        let mut cells = Vec::new();
        let mut html = String::from("<table>");
        for _ in 0..rows {
            html.push_str("<tr>");
            for _ in 0..cols {
                let n = b.rng.random_range(1..=4);
                let cell = b.words(true, n);
                html.push_str(&format!("<td>{cell}</td>"));
                cells.push(cell);
            }
            html.push_str("</tr>");
        }
        html.push_str("</table>");
        b.register_composite(&cells, LabelSet::none().with(LABEL_TABLE).with(LABEL_PRIMARY));
        b.html.push_str(&html);
    }

    if b.rng.random_bool(spec.list_probability) {
        let items = b.rng.random_range(3..=6);
        let mut texts = Vec::new();
        let tag = if b.rng.random_bool(0.5) { "ul" } else { "ol" };
        let mut html = format!("<{tag}>");
        for _ in 0..items {
            let n = b.rng.random_range(3..=8);
            let item = b.words(true, n);
            html.push_str(&format!("<li>{item}</li>"));
            texts.push(item);
        }
        html.push_str(&format!("</{tag}>"));
        b.register_composite(&texts, LabelSet::none().with(LABEL_LIST).with(LABEL_PRIMARY));
        b.html.push_str(&html);
    }
    b.html.push_str("</main>");

    // sidebar of related links plus remaining menus
    b.html.push_str("<aside><div class=\"related\">");
    let related = b.rng.random_range(2..=5);
    for _ in 0..related {
        let link = b.span(false, LabelSet::none(), 2, 4);
        b.html.push_str(&format!("<p><a href=\"#\">{link}</a></p>"));
    }
    b.html.push_str("</div></aside>");
    for _ in 1..menus {
        b.menu_block();
    }

    // footer legalese: long boilerplate prose with no links
    b.html.push_str("<footer>");
    let footers = b
        .rng
        .random_range(spec.footer_paragraph_range.0..=spec.footer_paragraph_range.1);
    for _ in 0..footers {
        let legal = b.span(false, LabelSet::none(), 10, 20);
        b.html.push_str(&format!("<p>{legal}</p>"));
    }
    b.html.push_str("</footer></body></html>");

    let html = b.html;
    let roles = b.roles;

    // assign labels against the node ids the pipeline actually produces
    let tree = parse_html(&html).expect("generated page parses");
    let nodes = build_node_sequence(&tree);
    let mut labels: BTreeMap<usize, LabelSet> = BTreeMap::new();
    for node in &nodes {
        if let Some(&label) = roles.get(&node.text) {
            if label != LabelSet::none() {
                labels.insert(node.node_id, label);
            } else {
                // boilerplate entries stay explicit in the corpus file so a
                // reader can distinguish "labeled negative" from "unlabeled"
                labels.insert(node.node_id, LabelSet::none());
            }
        }
    }

    LabeledDocument {
        doc_id: format!("synth-{:08x}-{index:05}", spec.seed),
        html,
        labels,
    }
}
