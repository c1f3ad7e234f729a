//! A small element tree on top of `quick-xml`, plus the escaping writer used by
//! every codec in this crate. Attributes are ignored; documents here carry all
//! data in element text.

use quick_xml::events::Event;
use quick_xml::Reader;

use super::ProtocolError;

/// Nesting limit for parsed documents. Deeper input is rejected before any
/// recursion happens.
pub(crate) const MAX_ELEMENT_DEPTH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Element {
    pub name: String,
    pub children: Vec<Element>,
    pub text: String,
}

impl Element {
    fn new(name: String) -> Self {
        Element {
            name,
            children: Vec::new(),
            text: String::new(),
        }
    }

    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Element, ProtocolError> {
        self.child(name)
            .ok_or_else(|| ProtocolError::MissingField(name.to_string()))
    }

    /// Text of a leaf element. Elements with children have no text.
    pub fn leaf_text(&self) -> Result<&str, ProtocolError> {
        if !self.children.is_empty() {
            return Err(ProtocolError::MalformedDocument(format!(
                "<{}> must not contain elements",
                self.name
            )));
        }
        Ok(&self.text)
    }

    pub fn expect_name(&self, name: &str) -> Result<(), ProtocolError> {
        if self.name == name {
            Ok(())
        } else {
            Err(ProtocolError::MalformedDocument(format!(
                "expected <{}>, found <{}>",
                name, self.name
            )))
        }
    }
}

pub(crate) fn is_xml_char(c: char) -> bool {
    matches!(c,
        '\u{9}' | '\u{A}' | '\u{D}'
        | '\u{20}'..='\u{D7FF}'
        | '\u{E000}'..='\u{FFFD}'
        | '\u{10000}'..='\u{10FFFF}')
}

/// Parses a complete document into its root element.
///
/// Text directly inside an element that also has child elements must be
/// whitespace and is dropped; text of leaf elements is kept verbatim.
pub(crate) fn parse(bytes: &[u8]) -> Result<Element, ProtocolError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ProtocolError::MalformedDocument(format!("invalid UTF-8: {e}")))?;
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| ProtocolError::MalformedDocument(e.to_string()))?;
        match event {
            Event::Start(start) => {
                if root.is_some() {
                    return Err(malformed("content after the root element"));
                }
                if stack.len() >= MAX_ELEMENT_DEPTH {
                    return Err(ProtocolError::DepthExceeded);
                }
                stack.push(Element::new(element_name(start.name().as_ref())?));
            }
            Event::Empty(start) => {
                let el = Element::new(element_name(start.name().as_ref())?);
                if stack.len() >= MAX_ELEMENT_DEPTH {
                    return Err(ProtocolError::DepthExceeded);
                }
                attach(&mut stack, &mut root, el)?;
            }
            Event::End(_) => {
                let el = stack.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                attach(&mut stack, &mut root, el)?;
            }
            Event::Text(t) => {
                let s = t
                    .unescape()
                    .map_err(|e| ProtocolError::MalformedDocument(e.to_string()))?;
                push_text(&mut stack, &s)?;
            }
            Event::CData(c) => {
                let raw = c.into_inner();
                let s = std::str::from_utf8(&raw)
                    .map_err(|e| ProtocolError::MalformedDocument(e.to_string()))?;
                if stack.is_empty() {
                    return Err(malformed("character data outside the root element"));
                }
                push_text(&mut stack, s)?;
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(malformed("document type declarations are not accepted")),
            Event::Eof => break,
        }
    }
    if !stack.is_empty() {
        return Err(malformed("unexpected end of document"));
    }
    let mut root = root.ok_or_else(|| malformed("empty document"))?;
    normalize(&mut root)?;
    Ok(root)
}

fn malformed(msg: &str) -> ProtocolError {
    ProtocolError::MalformedDocument(msg.to_string())
}

fn element_name(raw: &[u8]) -> Result<String, ProtocolError> {
    std::str::from_utf8(raw)
        .map(str::to_string)
        .map_err(|e| ProtocolError::MalformedDocument(e.to_string()))
}

fn push_text(stack: &mut [Element], s: &str) -> Result<(), ProtocolError> {
    if s.chars().any(|c| !is_xml_char(c)) {
        return Err(malformed("character not allowed in XML"));
    }
    match stack.last_mut() {
        Some(top) => {
            top.text.push_str(s);
            Ok(())
        }
        None if s.chars().all(char::is_whitespace) => Ok(()),
        None => Err(malformed("text outside the root element")),
    }
}

fn attach(stack: &mut [Element], root: &mut Option<Element>, el: Element) -> Result<(), ProtocolError> {
    match stack.last_mut() {
        Some(parent) => parent.children.push(el),
        None => {
            if root.is_some() {
                return Err(malformed("more than one root element"));
            }
            *root = Some(el);
        }
    }
    Ok(())
}

fn normalize(el: &mut Element) -> Result<(), ProtocolError> {
    // Iterative so that the depth limit is the only bound on nesting.
    let mut pending: Vec<&mut Element> = vec![el];
    while let Some(e) = pending.pop() {
        if !e.children.is_empty() {
            if !e.text.chars().all(char::is_whitespace) {
                return Err(ProtocolError::MalformedDocument(format!(
                    "<{}> mixes text and elements",
                    e.name
                )));
            }
            e.text.clear();
            pending.extend(e.children.iter_mut());
        }
    }
    Ok(())
}

/// Writes XML text with the five special characters and carriage returns escaped.
pub(crate) fn escape_into(out: &mut String, s: &str) -> Result<(), ProtocolError> {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\r' => out.push_str("&#13;"),
            c if is_xml_char(c) => out.push(c),
            _ => return Err(ProtocolError::InvalidText),
        }
    }
    Ok(())
}

/// Indenting writer for the document formats (job, dataset, workflow).
pub(crate) struct DocWriter {
    out: String,
    depth: usize,
}

impl DocWriter {
    pub fn new() -> Self {
        DocWriter {
            out: String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"),
            depth: 0,
        }
    }

    fn indent(&mut self) {
        for _ in 0..self.depth {
            self.out.push_str("  ");
        }
    }

    pub fn open(&mut self, name: &str) {
        self.indent();
        self.out.push('<');
        self.out.push_str(name);
        self.out.push_str(">\n");
        self.depth += 1;
    }

    pub fn close(&mut self, name: &str) {
        self.depth -= 1;
        self.indent();
        self.out.push_str("</");
        self.out.push_str(name);
        self.out.push_str(">\n");
    }

    pub fn leaf(&mut self, name: &str, text: &str) -> Result<(), ProtocolError> {
        self.indent();
        self.out.push('<');
        self.out.push_str(name);
        self.out.push('>');
        escape_into(&mut self.out, text)?;
        self.out.push_str("</");
        self.out.push_str(name);
        self.out.push_str(">\n");
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.out.into_bytes()
    }
}
